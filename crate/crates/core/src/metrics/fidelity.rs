use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ndkernel::Array;

pub fn mse(a: &Array, b: &Array) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.dot(&d)? / d.len() as f64)
}

/// `10 log10(peak² / MSE)`; `f64::INFINITY` when the inputs are equal.
pub fn psnr(a: &Array, b: &Array, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(invalid(format!("PSNR peak {peak} must be positive")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Flattened cosine `<u, v> / sqrt(<u, u> <v, v>)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &Array, v: &Array) -> Result<f64> {
    let uv = u.dot(v)?;
    let (uu, vv) = (u.dot(u)?, v.dot(v)?);
    if uu == 0.0 || vv == 0.0 {
        return Err(invalid("cosine similarity of a zero vector"));
    }
    Ok((uv / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// Constants and exponents of whole-image SSIM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl SsimConfig {
    /// `C1 = (0.01 R)²`, `C2 = (0.03 R)²`, `C3 = C2 / 2`, unit exponents.
    pub fn for_range(range: f64) -> Self {
        let c2 = (0.03 * range).powi(2);
        Self {
            c1: (0.01 * range).powi(2),
            c2,
            c3: c2 / 2.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self::for_range(1.0)
    }
}

/// Global SSIM `l^α c^β s^γ` from population means, deviations and covariance.
pub fn ssim(a: &Array, b: &Array, cfg: &SsimConfig) -> Result<f64> {
    a.check_same("ssim", b)?;
    if !(cfg.c1 > 0.0 && cfg.c2 > 0.0 && cfg.c3 > 0.0) {
        return Err(invalid("SSIM constants must be positive"));
    }
    if a.is_empty() {
        return Err(invalid("SSIM of empty images"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.mean(), b.mean());
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    let (sa, sb) = (va.sqrt(), vb.sqrt());
    let l = (2.0 * ma * mb + cfg.c1) / (ma * ma + mb * mb + cfg.c1);
    let c = (2.0 * sa * sb + cfg.c2) / (va + vb + cfg.c2);
    let s = (cov + cfg.c3) / (sa * sb + cfg.c3);
    Ok(pow(l, cfg.alpha) * pow(c, cfg.beta) * pow(s, cfg.gamma))
}

fn pow(x: f64, e: f64) -> f64 {
    if e == 1.0 {
        x
    } else {
        x.powf(e)
    }
}
