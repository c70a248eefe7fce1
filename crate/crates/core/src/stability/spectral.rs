use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ndkernel::{Array, Linearization, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerIteration {
    /// Stop once the relative change of the estimate falls below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Seed of the normal start vector.
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iters: 500,
            seed: 0,
        }
    }
}

/// Largest singular value of the Jacobian captured by `lin`, by power
/// iteration on `JᵀJ`. The estimate at each iterate is `|J v|` for unit `v`.
pub fn spectral_norm(lin: &Linearization<'_>, cfg: &PowerIteration) -> Result<f64> {
    if !(cfg.tol > 0.0) {
        return Err(invalid(format!("tolerance {} must be positive", cfg.tol)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v = Array::randn(lin.input_shape().to_vec(), &mut rng);
    let n = v.norm();
    if n == 0.0 {
        return Ok(0.0);
    }
    v = v.scaled(1.0 / n);
    let mut estimate = f64::NAN;
    for _ in 0..cfg.max_iters {
        let jv = lin.jvp(&v)?;
        let sigma = jv.norm();
        if sigma == 0.0 {
            return Ok(0.0);
        }
        if (sigma - estimate).abs() <= cfg.tol * sigma {
            return Ok(sigma);
        }
        estimate = sigma;
        let w = lin.vjp(&jv)?;
        let wn = w.norm();
        if wn == 0.0 {
            return Ok(0.0);
        }
        v = w.scaled(1.0 / wn);
    }
    Err(Error::NotConverged {
        iters: cfg.max_iters,
        estimate,
    })
}

/// [`spectral_norm`] of `f` linearised at `x`.
pub fn spectral_norm_of<'a, F>(f: F, x: &'a Array, cfg: &PowerIteration) -> Result<f64>
where
    F: FnOnce(&mut Tape<'a>, Var) -> Result<Var>,
{
    spectral_norm(&Linearization::record(f, x)?, cfg)
}
