use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spectral::{spectral_norm_of, PowerIteration};
use crate::error::{invalid, Error, Result};
use crate::ndkernel::{Array, Tape, Var};

/// Idealised contraction model: `L` layers each shrinking perturbations by
/// `gamma`, skip fusion mixing with weight `alpha_mix`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdealModelSpec {
    pub depth: usize,
    pub gamma: f64,
    pub alpha_mix: f64,
    #[serde(default)]
    pub delta_step: f64,
    #[serde(default = "default_eps_max")]
    pub eps_max: f64,
}

fn default_eps_max() -> f64 {
    1.0
}

impl IdealModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(invalid(format!("depth {} must be positive and even", self.depth)));
        }
        check_open_unit("gamma", self.gamma)?;
        check_open_unit("alpha_mix", self.alpha_mix)?;
        if !(self.delta_step >= 0.0) || !(self.eps_max > 0.0) {
            return Err(invalid("need delta_step >= 0 and eps_max > 0"));
        }
        Ok(())
    }
}

fn check_open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {v} must lie in (0, 1)")))
    }
}

/// Bound on layer `l > L/2` of the skip model: `(1 - α) γ + α γ^(2l - L)`.
pub fn ideal_layer_bound(gamma: f64, alpha_mix: f64, l: usize, depth: usize) -> Result<f64> {
    check_open_unit("gamma", gamma)?;
    check_open_unit("alpha_mix", alpha_mix)?;
    if depth % 2 != 0 || l <= depth / 2 || l > depth {
        return Err(invalid(format!("layer {l} outside the upper half of depth {depth}")));
    }
    Ok((1.0 - alpha_mix) * gamma + alpha_mix * gamma.powi((2 * l - depth) as i32))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdealBounds {
    pub sigma_skip_bound: f64,
    pub sigma_vanilla: f64,
}

/// `γ^(L/2) Π_{l > L/2} layer bound` against `γ^L`.
pub fn ideal_model_bounds(spec: &IdealModelSpec) -> Result<IdealBounds> {
    spec.validate()?;
    let half = spec.depth / 2;
    let mut skip = spec.gamma.powi(half as i32);
    for l in half + 1..=spec.depth {
        skip *= ideal_layer_bound(spec.gamma, spec.alpha_mix, l, spec.depth)?;
    }
    Ok(IdealBounds {
        sigma_skip_bound: skip,
        sigma_vanilla: spec.gamma.powi(spec.depth as i32),
    })
}

/// Error after `steps` reuses: `(Lip^T - 1) / (Lip - 1) δ`, or `T δ` at `Lip = 1`.
pub fn cumulative_error(lip: f64, delta_step: f64, steps: u32) -> Result<f64> {
    if !(lip >= 0.0) || steps == 0 {
        return Err(invalid("need Lip >= 0 and T >= 1"));
    }
    if (lip - 1.0).abs() < 1e-4 {
        // Near 1 the closed form cancels badly; sum the series directly.
        let mut acc = 0.0;
        let mut p = 1.0;
        for _ in 0..steps {
            acc += p;
            p *= lip;
        }
        return Ok(acc * delta_step);
    }
    Ok((lip.powi(steps as i32) - 1.0) / (lip - 1.0) * delta_step)
}

/// Longest reuse run within tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReuseInterval {
    Finite(u64),
    /// The error never exceeds the tolerance.
    Unbounded,
}

impl fmt::Display for ReuseInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReuseInterval::Finite(t) => write!(f, "{t}"),
            ReuseInterval::Unbounded => f.write_str("unbounded"),
        }
    }
}

/// Relative slack when comparing accumulated error to `ε_max`, so that
/// values equal up to rounding count as within tolerance.
pub const REUSE_SLACK: f64 = 1e-12;

/// Largest `τ` with `cumulative_error(Lip, δ, τ) <= ε_max`.
pub fn max_reuse_interval(lip: f64, delta_step: f64, eps_max: f64) -> Result<ReuseInterval> {
    if !(lip >= 0.0) || !(delta_step >= 0.0) || !(eps_max > 0.0) {
        return Err(invalid("need Lip >= 0, δ >= 0 and ε_max > 0"));
    }
    let cap = eps_max * (1.0 + REUSE_SLACK);
    if delta_step > cap {
        return Ok(ReuseInterval::Finite(0));
    }
    if delta_step == 0.0 || (lip < 1.0 && delta_step / (1.0 - lip) <= cap) {
        return Ok(ReuseInterval::Unbounded);
    }
    let mut err = 0.0;
    let mut tau = 0;
    loop {
        err = lip * err + delta_step;
        if err > cap {
            return Ok(ReuseInterval::Finite(tau));
        }
        tau += 1;
    }
}

/// Measured Jacobian norms of a constructed contraction chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub seed: u64,
    pub depth: usize,
    pub gamma: f64,
    pub alpha_mix: f64,
    pub nonlinearity: f64,
    pub sigma_vanilla: f64,
    pub sigma_skip: f64,
    pub bounds: Option<IdealBounds>,
    pub skip_below_vanilla: bool,
}

/// Settings of the constructed chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub width: usize,
    /// Weight `κ` of the GELU term in `h + κ gelu(h)`; 0 gives linear layers.
    pub nonlinearity: f64,
    pub power: PowerIteration,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            width: 16,
            nonlinearity: 0.1,
            power: PowerIteration {
                tol: 1e-10,
                max_iters: 5000,
                seed: 0,
            },
        }
    }
}

/// Random orthogonal matrix from the QR factor of a normal draw.
pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Array {
    let g = Array::randn([n, n], rng);
    let q = DMatrix::from_row_slice(n, n, g.data()).qr().q();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(q[(i, j)]);
        }
    }
    Array::new([n, n], data).expect("n x n")
}

struct Chain {
    mats: Vec<Array>,
    scales: Vec<f64>,
    kappa: f64,
}

impl Chain {
    /// `c_l (h + κ gelu(h)) Q_l` on a `[1, n]` row.
    fn layer<'a>(&self, tape: &mut Tape<'a>, l: usize, h: Var, q: Var) -> Result<Var> {
        let g = tape.gelu(h);
        let g = tape.scale(g, self.kappa);
        let s = tape.add(h, g)?;
        let m = tape.matmul(s, q)?;
        Ok(tape.scale(m, self.scales[l]))
    }

    fn vanilla<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.mats.len() {
            let q = tape.input_ref(&self.mats[l]);
            h = self.layer(tape, l, h, q)?;
        }
        Ok(h)
    }

    /// Lower half plain; upper layer `l` (1-based) becomes
    /// `(1 - α) T_l(h) + α (T_l ∘ … ∘ T_{L-l+1})(h)`.
    fn skip<'a>(&'a self, tape: &mut Tape<'a>, x: Var, alpha: f64) -> Result<Var> {
        let depth = self.mats.len();
        let qs: Vec<Var> = self.mats.iter().map(|m| tape.input_ref(m)).collect();
        let mut h = x;
        for l in 1..=depth {
            let direct = self.layer(tape, l - 1, h, qs[l - 1])?;
            if l <= depth / 2 {
                h = direct;
                continue;
            }
            let mut long = h;
            for j in depth + 1 - l..=l {
                long = self.layer(tape, j - 1, long, qs[j - 1])?;
            }
            let a = tape.scale(direct, 1.0 - alpha);
            let b = tape.scale(long, alpha);
            h = tape.add(a, b)?;
        }
        Ok(h)
    }
}

/// Build `L` layers with random orthogonal mixing, rescale each so its
/// Jacobian norm at the vanilla operating point is `gamma`, and compare the
/// measured full-chain norms of the vanilla and skip compositions.
pub fn empirical_theorem1_check(
    seed: u64,
    depth: usize,
    gamma: f64,
    alpha_mix: f64,
    chain_cfg: &ChainConfig,
) -> Result<Theorem1Report> {
    if depth == 0 || depth % 2 != 0 {
        return Err(invalid(format!("depth {depth} must be positive and even")));
    }
    if !(gamma > 0.0 && gamma < 1.0) || !(0.0..1.0).contains(&alpha_mix) {
        return Err(invalid("need 0 < γ < 1 and 0 <= α < 1"));
    }
    let n = chain_cfg.width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mats: Vec<Array> = (0..depth).map(|_| random_orthogonal(n, &mut rng)).collect();
    let x = Array::randn([1, n], &mut rng);
    let mut chain = Chain {
        mats,
        scales: vec![1.0; depth],
        kappa: chain_cfg.nonlinearity,
    };

    let mut h = x.clone();
    for l in 0..depth {
        let unit = Chain {
            mats: vec![chain.mats[l].clone()],
            scales: vec![1.0],
            kappa: chain.kappa,
        };
        // Single-layer singular values cluster near the peak of 1 + κ gelu',
        // where the iteration creeps along a plateau already within the
        // cluster width of the answer, so the last estimate is kept.
        let sigma = match spectral_norm_of(|t, v| unit.vanilla(t, v), &h, &chain_cfg.power) {
            Err(Error::NotConverged { estimate, .. }) => estimate,
            other => other?,
        };
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(invalid(format!("cannot rescale layer {} with norm {sigma}", l + 1)));
        }
        chain.scales[l] = gamma / sigma;
        let mut tape = Tape::new();
        let hv = tape.input(h.clone());
        let q = tape.input_ref(&chain.mats[l]);
        let out = chain.layer(&mut tape, l, hv, q)?;
        h = tape.value(out).clone();
    }

    let sigma_vanilla = spectral_norm_of(|t, v| chain.vanilla(t, v), &x, &chain_cfg.power)?;
    let sigma_skip = spectral_norm_of(|t, v| chain.skip(t, v, alpha_mix), &x, &chain_cfg.power)?;
    let bounds = if alpha_mix > 0.0 {
        Some(ideal_model_bounds(&IdealModelSpec {
            depth,
            gamma,
            alpha_mix,
            delta_step: 0.0,
            eps_max: 1.0,
        })?)
    } else {
        None
    };
    Ok(Theorem1Report {
        seed,
        depth,
        gamma,
        alpha_mix,
        nonlinearity: chain_cfg.nonlinearity,
        sigma_vanilla,
        sigma_skip,
        bounds,
        skip_below_vanilla: sigma_skip < sigma_vanilla,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_bound_spot_value() {
        let b = ideal_layer_bound(0.9, 0.5, 3, 4).unwrap();
        assert!((b - 0.855).abs() < 1e-12);
        assert!(ideal_layer_bound(0.9, 0.5, 2, 4).is_err());
        assert!(ideal_layer_bound(0.9, 0.5, 5, 4).is_err());
        assert!(ideal_layer_bound(1.0, 0.5, 3, 4).is_err());
    }

    #[test]
    fn layer_bound_collapses_to_gamma() {
        let b = ideal_layer_bound(0.9, 1e-12, 4, 4).unwrap();
        assert!((b - 0.9).abs() < 1e-9);
    }

    #[test]
    fn model_bounds_spot_value() {
        let spec = IdealModelSpec {
            depth: 4,
            gamma: 0.9,
            alpha_mix: 0.5,
            delta_step: 0.0,
            eps_max: 1.0,
        };
        let b = ideal_model_bounds(&spec).unwrap();
        assert!((b.sigma_vanilla - 0.6561).abs() < 1e-12);
        let want = 0.81 * 0.855 * (0.45 + 0.5 * 0.6561);
        assert!((b.sigma_skip_bound - want).abs() < 1e-12);
        assert!((b.sigma_skip_bound - 0.5388).abs() < 1e-4);
    }

    #[test]
    fn cumulative_error_cases() {
        assert!((cumulative_error(0.5, 0.1, 3).unwrap() - 0.175).abs() < 1e-15);
        assert_eq!(cumulative_error(0.7, 0.3, 1).unwrap(), 0.3);
        assert!((cumulative_error(1.0, 0.2, 5).unwrap() - 1.0).abs() < 1e-15);
        assert!(cumulative_error(-0.1, 0.2, 5).is_err());
        assert!(cumulative_error(0.5, 0.2, 0).is_err());
    }

    #[test]
    fn reuse_interval_cases() {
        assert_eq!(max_reuse_interval(0.5, 0.1, 0.175).unwrap(), ReuseInterval::Finite(3));
        assert_eq!(max_reuse_interval(0.5, 0.3, 0.2).unwrap(), ReuseInterval::Finite(0));
        assert_eq!(max_reuse_interval(0.5, 0.1, 0.2).unwrap(), ReuseInterval::Unbounded);
        assert_eq!(max_reuse_interval(2.0, 0.0, 0.2).unwrap(), ReuseInterval::Unbounded);
        assert_eq!(max_reuse_interval(1.0, 0.1, 0.35).unwrap(), ReuseInterval::Finite(3));
        assert!(ReuseInterval::Unbounded > ReuseInterval::Finite(u64::MAX));
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_orthogonal(5, &mut rng);
        let m = DMatrix::from_row_slice(5, 5, q.data());
        assert!((m.transpose() * &m - DMatrix::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn linear_chain_hits_gamma_power() {
        let cfg = ChainConfig {
            nonlinearity: 0.0,
            ..ChainConfig::default()
        };
        let r = empirical_theorem1_check(1, 4, 0.9, 0.5, &cfg).unwrap();
        assert!((r.sigma_vanilla - 0.6561).abs() < 1e-6);
        assert!(r.sigma_skip < r.sigma_vanilla);
        assert!(r.sigma_skip <= r.bounds.unwrap().sigma_skip_bound + 1e-9);
    }

    #[test]
    fn zero_mixing_matches_vanilla() {
        let r = empirical_theorem1_check(2, 4, 0.8, 0.0, &ChainConfig::default()).unwrap();
        assert!((r.sigma_skip - r.sigma_vanilla).abs() < 1e-8);
    }
}
