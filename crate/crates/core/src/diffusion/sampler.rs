use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::ndkernel::Array;

/// Conditioning label: a class index or the null ("unconditional") label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Null,
}

/// Anything that predicts the injected noise of a noisy input.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Array, t: usize, label: Label) -> Result<Array>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(&self, x_t: &Array, t: usize, label: Label) -> Result<Array> {
        (**self).predict(x_t, t, label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Length of the timestep subsequence. For DDPM a subsequence shorter
    /// than `T` uses respaced betas.
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 50,
            cfg_scale: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Strictly decreasing timesteps, starting at `T` and (for two or more
    /// steps) ending at 1.
    pub fn timesteps(&self, sched: &NoiseSchedule) -> Result<Vec<usize>> {
        spaced_timesteps(sched.len(), self.steps)
    }

    fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(invalid(format!("cfg scale {} must be >= 0", self.cfg_scale)));
        }
        if self.steps == 0 || self.steps > sched.len() {
            return Err(invalid(format!(
                "sampler steps {} outside 1..={}",
                self.steps,
                sched.len()
            )));
        }
        Ok(())
    }
}

/// Evenly spaced, rounded timesteps `T = t_0 > t_1 > ... > t_{S-1} = 1`.
pub fn spaced_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(invalid("empty timestep subsequence"));
    }
    if steps > total {
        return Err(invalid(format!("{steps} steps exceed schedule length {total}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps)
        .rev()
        .map(|k| 1 + (k as f64 * span).round() as usize)
        .collect())
}

/// Standard-normal starting noise, reproducible from `seed`.
pub fn initial_noise(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::randn(shape.to_vec(), &mut rng)
}

/// Generator for the per-step DDPM noise of a trajectory. Uses a separate
/// ChaCha stream from [`initial_noise`] so the two never overlap.
pub fn step_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Classifier-free guidance: `eps_null + scale * (eps_cond - eps_null)`.
/// Scale 1 evaluates only the conditional pass, scale 0 only the null pass.
pub fn cfg_predict<P: NoisePredictor + ?Sized>(
    model: &P,
    x_t: &Array,
    t: usize,
    label: Label,
    scale: f64,
) -> Result<Array> {
    guided(label, scale, |lab| model.predict(x_t, t, lab))
}

/// Labels evaluated per step, in evaluation order.
pub fn guidance_labels(label: Label, scale: f64) -> Vec<Label> {
    if scale == 1.0 || label == Label::Null {
        vec![label]
    } else if scale == 0.0 {
        vec![Label::Null]
    } else {
        vec![Label::Null, label]
    }
}

/// Guidance over an arbitrary per-label evaluator, called once per entry of
/// [`guidance_labels`].
pub fn guided<F>(label: Label, scale: f64, mut eval: F) -> Result<Array>
where
    F: FnMut(Label) -> Result<Array>,
{
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(invalid(format!("cfg scale {scale} must be >= 0")));
    }
    match guidance_labels(label, scale)[..] {
        [only] => eval(only),
        _ => {
            let null = eval(Label::Null)?;
            let cond = eval(label)?;
            combine_guidance(&null, &cond, scale)
        }
    }
}

pub fn combine_guidance(null: &Array, cond: &Array, scale: f64) -> Result<Array> {
    null.zip_map(cond, |n, c| n + scale * (c - n))
}

/// Transition coefficients from timestep `t` down to `s < t`.
fn transition(sched: &NoiseSchedule, t: usize, s: usize) -> (f64, f64) {
    if s + 1 == t {
        (sched.alpha(t), sched.beta(t))
    } else {
        let alpha = sched.alpha_bar(t) / sched.alpha_bar(s);
        (alpha, 1.0 - alpha)
    }
}

/// DDPM posterior mean for a step `t -> s`:
/// `(x_t - beta / sqrt(1 - ab_t) * eps) / sqrt(alpha)`.
pub fn ddpm_mean(sched: &NoiseSchedule, x_t: &Array, eps: &Array, t: usize, s: usize) -> Result<Array> {
    let (alpha, beta) = transition(sched, t, s);
    let coeff = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    x_t.zip_map(eps, |x, e| inv * (x - coeff * e))
}

/// One ancestral DDPM update `t -> s` with fixed posterior variance. No noise
/// is drawn when `s == 0`.
pub fn ddpm_update<R: Rng + ?Sized>(
    sched: &NoiseSchedule,
    x_t: &Array,
    eps: &Array,
    t: usize,
    s: usize,
    rng: &mut R,
) -> Result<Array> {
    let mut mean = ddpm_mean(sched, x_t, eps, t, s)?;
    if s > 0 {
        let (_, beta) = transition(sched, t, s);
        let var = (1.0 - sched.alpha_bar(s)) / (1.0 - sched.alpha_bar(t)) * beta;
        let sd = var.sqrt();
        for v in mean.data_mut() {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(mean)
}

/// Deterministic (eta = 0) DDIM update `t -> s`.
pub fn ddim_update(sched: &NoiseSchedule, x_t: &Array, eps: &Array, t: usize, s: usize) -> Result<Array> {
    let (ab_t, ab_s) = (sched.alpha_bar(t), sched.alpha_bar(s));
    let (st, nt) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (ss, ns) = (ab_s.sqrt(), (1.0 - ab_s).sqrt());
    x_t.zip_map(eps, |x, e| {
        let x0 = (x - nt * e) / st;
        ss * x0 + ns * e
    })
}

/// One DDPM step of a full trajectory (`t -> t - 1`) with guided prediction.
pub fn ddpm_step<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    x_t: &Array,
    t: usize,
    label: Label,
    cfg_scale: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array> {
    sched.check_timestep(t)?;
    let eps = cfg_predict(model, x_t, t, label, cfg_scale)?;
    ddpm_update(sched, x_t, &eps, t, t - 1, rng)
}

/// Drives a sampler over its timestep subsequence. `predict(k, t, x_t)`
/// supplies the noise estimate for step `k` at timestep `t`; it is where
/// caching policies plug in. Per-step DDPM noise comes from
/// [`step_rng`]`(cfg.seed)`.
pub fn run_sampler<F>(sched: &NoiseSchedule, cfg: &SamplerConfig, x_start: &Array, mut predict: F) -> Result<Array>
where
    F: FnMut(usize, usize, &Array) -> Result<Array>,
{
    cfg.validate(sched)?;
    let ts = cfg.timesteps(sched)?;
    let mut rng = step_rng(cfg.seed);
    let mut x = x_start.clone();
    for (k, &t) in ts.iter().enumerate() {
        let s = ts.get(k + 1).copied().unwrap_or(0);
        let eps = predict(k, t, &x)?;
        x.check_same("sampler", &eps)?;
        x = match cfg.kind {
            SamplerKind::Ddpm => ddpm_update(sched, &x, &eps, t, s, &mut rng)?,
            SamplerKind::Ddim => ddim_update(sched, &x, &eps, t, s)?,
        };
    }
    Ok(x)
}

/// Uncached sampling with classifier-free guidance.
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    x_start: &Array,
    label: Label,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Array> {
    run_sampler(sched, cfg, x_start, |_, t, x| {
        cfg_predict(model, x, t, label, cfg.cfg_scale)
    })
}

/// Deterministic DDIM sampling; rejects a DDPM config.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    x_start: &Array,
    label: Label,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Array> {
    if cfg.kind != SamplerKind::Ddim {
        return Err(invalid("ddim_sample needs a DDIM sampler config"));
    }
    sample(model, x_start, label, cfg, sched)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Const(f64);
    impl NoisePredictor for Const {
        fn predict(&self, x: &Array, _: usize, _: Label) -> Result<Array> {
            Ok(Array::full(x.shape().to_vec(), self.0))
        }
    }

    /// Predicts `cond` for class labels and `null` for the null label.
    struct TwoValued {
        null: f64,
        cond: f64,
    }
    impl NoisePredictor for TwoValued {
        fn predict(&self, x: &Array, _: usize, label: Label) -> Result<Array> {
            let v = match label {
                Label::Null => self.null,
                Label::Class(_) => self.cond,
            };
            Ok(Array::full(x.shape().to_vec(), v))
        }
    }

    #[test]
    fn spaced_timesteps_are_strictly_decreasing() {
        for total in [1, 4, 50, 1000] {
            for steps in 1..=total.min(60) {
                let ts = spaced_timesteps(total, steps).unwrap();
                assert_eq!(ts.len(), steps);
                assert_eq!(ts[0], total);
                assert!(ts.windows(2).all(|w| w[0] > w[1]));
                if steps > 1 {
                    assert_eq!(*ts.last().unwrap(), 1);
                }
            }
        }
        assert!(spaced_timesteps(10, 0).is_err());
        assert!(spaced_timesteps(10, 11).is_err());
    }

    #[test]
    fn guidance_scale_limits() {
        let m = TwoValued { null: 0.0, cond: 1.0 };
        let x = Array::zeros([3]);
        let lab = Label::Class(2);
        assert_eq!(cfg_predict(&m, &x, 1, lab, 1.0).unwrap().data(), &[1.0; 3]);
        assert_eq!(cfg_predict(&m, &x, 1, lab, 0.0).unwrap().data(), &[0.0; 3]);
        assert_eq!(cfg_predict(&m, &x, 1, lab, 1.5).unwrap().data(), &[1.5; 3]);
        assert!(cfg_predict(&m, &x, 1, lab, -0.5).is_err());
    }

    #[test]
    fn ddpm_zero_prediction_at_t1_is_exactly_zero() {
        let sched = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let mut rng = step_rng(3);
        let out = ddpm_step(&Const(0.0), &Array::zeros([4]), 1, Label::Null, 1.0, &sched, &mut rng)
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ddpm_mean_hand_value() {
        // T=4, beta = [0.1, 0.2, 0.3, 0.4]; at t=2: alpha=0.8, ab=0.72.
        let sched = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let mu = ddpm_mean(&sched, &Array::from_vec(vec![1.0]), &Array::from_vec(vec![0.5]), 2, 1)
            .unwrap()
            .data()[0];
        let want = (1.0 - (0.2 / (1.0f64 - 0.72).sqrt()) * 0.5) / 0.8f64.sqrt();
        assert!((mu - want).abs() < 1e-12, "{mu} vs {want}");
    }

    #[test]
    fn ddpm_trajectory_is_seed_deterministic() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let cfg = SamplerConfig {
            kind: SamplerKind::Ddpm,
            steps: 20,
            cfg_scale: 1.0,
            seed: 11,
        };
        let x = initial_noise(&[6], 5);
        let a = sample(&Const(0.1), &x, Label::Null, &cfg, &sched).unwrap();
        let b = sample(&Const(0.1), &x, Label::Null, &cfg, &sched).unwrap();
        assert!(a.bit_eq(&b));
        let other = SamplerConfig { seed: 12, ..cfg };
        let c = sample(&Const(0.1), &x, Label::Null, &other, &sched).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn ddim_single_step_is_x0_estimate() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.3).unwrap();
        let cfg = SamplerConfig {
            steps: 1,
            ..SamplerConfig::default()
        };
        let x = initial_noise(&[5], 1);
        let out = ddim_sample(&Const(0.3), &x, Label::Null, &cfg, &sched).unwrap();
        let ab = sched.alpha_bar(10);
        for (o, xv) in out.data().iter().zip(x.data()) {
            let want = (xv - (1.0 - ab).sqrt() * 0.3) / ab.sqrt();
            assert!((o - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_ddpm_config_and_bad_steps() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.3).unwrap();
        let x = Array::zeros([2]);
        let ddpm = SamplerConfig {
            kind: SamplerKind::Ddpm,
            ..SamplerConfig::default()
        };
        assert!(ddim_sample(&Const(0.0), &x, Label::Null, &ddpm, &sched).is_err());
        let too_many = SamplerConfig {
            steps: 11,
            ..SamplerConfig::default()
        };
        assert!(sample(&Const(0.0), &x, Label::Null, &too_many, &sched).is_err());
        let empty = SamplerConfig {
            steps: 0,
            ..SamplerConfig::default()
        };
        assert!(sample(&Const(0.0), &x, Label::Null, &empty, &sched).is_err());
    }
}
