use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetSpec;
use crate::diffusion::{q_sample, Label, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::ndkernel::{gradient, Array, ParamSet};
use crate::skipdit::{FreezeMode, SkipDiT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Every parameter trains (fresh model).
    Scratch,
    /// Only long-skip fusion parameters train.
    SkipOnly,
    /// Every parameter trains (continued model).
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub label_dropout: f64,
    pub seed: u64,
    pub stage: Stage,
    /// Call the evaluation hook after every this many steps (0 = never).
    pub eval_every: usize,
    /// Squared-gradient averaging factor of the optimizer.
    pub rho: f64,
    pub eps: f64,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            label_dropout: 0.1,
            seed: 0,
            stage: Stage::Scratch,
            eval_every: 0,
            rho: 0.999,
            eps: 1e-8,
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(invalid(format!("label dropout {} outside [0, 1]", self.label_dropout)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return Err(invalid("need 0 <= rho < 1 and eps > 0"));
        }
        self.dataset.validate()
    }
}

/// Momentum-free adaptive update with bias correction:
/// `v ← ρ v + (1 - ρ) g²`, `θ ← θ - lr g / (sqrt(v / (1 - ρ^t)) + eps)`.
#[derive(Clone, Debug)]
pub struct Rmsprop {
    rho: f64,
    eps: f64,
    t: i32,
    v: ParamSet,
}

impl Rmsprop {
    pub fn new(params: &ParamSet, rho: f64, eps: f64) -> Self {
        Self {
            rho,
            eps,
            t: 0,
            v: params.zeros_like(),
        }
    }

    /// Update the entries named in `trainable`; others stay untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, trainable: &BTreeSet<String>, lr: f64) -> Result<()> {
        params.check_congruent(grads)?;
        self.t += 1;
        let correction = 1.0 - self.rho.powi(self.t);
        for name in trainable {
            let g = grads.require(name)?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let p = params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.rho * *vv + (1.0 - self.rho) * gv * gv;
                let delta = lr * gv / ((*vv / correction).sqrt() + self.eps);
                // Subtracting a signed zero would flip -0.0 entries.
                if delta != 0.0 {
                    *pv -= delta;
                }
            }
        }
        Ok(())
    }
}

/// Replace `label` by the null label with probability `p`.
pub fn drop_label<R: Rng + ?Sized>(label: Label, p: f64, rng: &mut R) -> Label {
    if rng.random::<f64>() < p {
        Label::Null
    } else {
        label
    }
}

/// `mean((model(x_t, t, label) - eps)²)` and its gradient.
pub fn noise_loss(
    model: &SkipDiT,
    params: &ParamSet,
    x_t: &Array,
    t: usize,
    label: Label,
    eps: &Array,
) -> Result<(f64, ParamSet)> {
    gradient(params, |tape, p| {
        let x = tape.input(x_t.clone());
        let target = tape.input(eps.clone());
        let pred = model.build(tape, p, x, t, label)?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        tape.mean(sq)
    })
}

/// Train `model` in place; returns the per-step mean batch loss.
pub fn train(model: &mut SkipDiT, cfg: &TrainConfig, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    train_with(model, cfg, sched, |_, _| Ok(()))
}

/// [`train`] calling `on_eval(step, model)` after every `eval_every` steps.
pub fn train_with<F>(model: &mut SkipDiT, cfg: &TrainConfig, sched: &NoiseSchedule, mut on_eval: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &SkipDiT) -> Result<()>,
{
    cfg.validate()?;
    if cfg.stage == Stage::SkipOnly && !model.is_skip() {
        return Err(Error::RequiresSkip("skip-only training"));
    }
    if cfg.dataset.image_shape() != model.config().image_shape() {
        return Err(invalid(format!(
            "dataset images {:?} vs model images {:?}",
            cfg.dataset.image_shape(),
            model.config().image_shape()
        )));
    }
    if cfg.dataset.num_classes > model.config().num_classes {
        return Err(invalid("dataset has more classes than the model"));
    }
    let trainable = model.freeze_mask(match cfg.stage {
        Stage::SkipOnly => FreezeMode::SkipOnly,
        Stage::Scratch | Stage::Full => FreezeMode::All,
    })?;
    let mut data = cfg.dataset.stream()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut opt = Rmsprop::new(model.params(), cfg.rho, cfg.eps);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut grads = model.params().zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (x0, k) = data.next_sample();
            let label = drop_label(Label::Class(k), cfg.label_dropout, &mut rng);
            let t = rng.random_range(1..=sched.len());
            let eps = Array::randn(x0.shape().to_vec(), &mut rng);
            let x_t = q_sample(&x0, t, &eps, sched)?;
            let (l, g) = noise_loss(model, model.params(), &x_t, t, label, &eps)?;
            loss += l;
            grads.add_scaled(&g, 1.0)?;
        }
        let b = cfg.batch_size as f64;
        loss /= b;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        grads.scale(1.0 / b);
        opt.step(model.params_mut(), &grads, &trainable, cfg.lr)?;
        losses.push(loss);
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            on_eval(step, model)?;
        }
    }
    Ok(losses)
}

/// `step,loss` rows (steps counted from 1).
pub fn write_loss_csv<W: Write>(losses: &[f64], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        out.write_record(&[(i + 1).to_string(), l.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Mean of a window of losses.
pub fn mean_loss(losses: &[f64]) -> f64 {
    losses.iter().sum::<f64>() / losses.len() as f64
}
