use std::io::Write;

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetSpec, Projection};
use super::train::{train_with, TrainConfig};
use crate::diffusion::{initial_noise, sample, Label, NoiseSchedule, SamplerConfig};
use crate::error::{invalid, Result};
use crate::metrics::{fit_gaussian, frechet_gaussian};
use crate::ndkernel::Array;
use crate::skipdit::{ModelConfig, SkipDiT, Variant};

/// Fréchet distance between a Gaussian fitted to `samples` (optionally
/// projected) and the dataset's analytic population statistics.
pub fn toy_fid_from_samples(samples: &[Array], spec: &DatasetSpec, projection: Option<&Projection>) -> Result<f64> {
    if samples.len() < 2 {
        return Err(invalid("toy FID needs at least 2 samples"));
    }
    let features = match projection {
        Some(p) => samples.iter().map(|s| p.apply(s)).collect::<Result<Vec<_>>>()?,
        None => samples.to_vec(),
    };
    frechet_gaussian(&fit_gaussian(&features)?, &spec.population_stats(projection)?)
}

/// `n` samples cycling through the dataset's classes. Sample `i` starts from
/// noise seeded `seed + i` and uses that seed for its sampler too.
pub fn generate_samples(
    model: &SkipDiT,
    spec: &DatasetSpec,
    n: usize,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Array>> {
    let shape = model.config().image_shape();
    (0..n)
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let cfg = SamplerConfig { seed: s, ..*sampler };
            sample(model, &initial_noise(&shape, s), Label::Class(i % spec.num_classes), &cfg, sched)
        })
        .collect()
}

pub fn toy_fid_eval(
    model: &SkipDiT,
    spec: &DatasetSpec,
    n: usize,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    projection: Option<&Projection>,
) -> Result<f64> {
    if n < 2 {
        return Err(invalid("toy FID needs at least 2 samples"));
    }
    let samples = generate_samples(model, spec, n, sampler, sched, sampler.seed)?;
    toy_fid_from_samples(&samples, spec, projection)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub model: ModelConfig,
    /// Shared budget; `eval_every` sets the checkpoint cadence.
    pub train: TrainConfig,
    pub eval_samples: usize,
    pub sampler: SamplerConfig,
    /// Project flattened pixels to this many dims before fitting.
    pub projection_dim: Option<usize>,
    pub projection_seed: u64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig {
                eval_every: 250,
                ..TrainConfig::default()
            },
            eval_samples: 200,
            sampler: SamplerConfig {
                steps: 20,
                ..SamplerConfig::default()
            },
            projection_dim: Some(16),
            projection_seed: 0,
        }
    }
}

impl ConvergenceConfig {
    pub fn projection(&self) -> Result<Option<Projection>> {
        self.projection_dim
            .map(|d| Projection::random(self.train.dataset.pixels(), d, self.projection_seed))
            .transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidCurve {
    pub steps: Vec<usize>,
    pub fid: Vec<f64>,
}

impl FidCurve {
    /// First checkpoint step whose score is at or below `target`.
    pub fn steps_to(&self, target: f64) -> Option<usize> {
        self.steps.iter().zip(&self.fid).find(|(_, f)| **f <= target).map(|(s, _)| *s)
    }
}

/// Train one variant from scratch with `seed` and score every checkpoint.
pub fn fid_curve(cfg: &ConvergenceConfig, variant: Variant, seed: u64, sched: &NoiseSchedule) -> Result<FidCurve> {
    if cfg.train.eval_every == 0 {
        return Err(invalid("convergence runs need a positive eval cadence"));
    }
    let projection = cfg.projection()?;
    let mut model = SkipDiT::new(cfg.model.with_variant(variant), seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut curve = FidCurve {
        steps: Vec::new(),
        fid: Vec::new(),
    };
    train_with(&mut model, &train_cfg, sched, |step, m| {
        let f = toy_fid_eval(m, &cfg.train.dataset, cfg.eval_samples, &cfg.sampler, sched, projection.as_ref())?;
        curve.steps.push(step);
        curve.fid.push(f);
        Ok(())
    })?;
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRun {
    pub seed: u64,
    pub vanilla: FidCurve,
    pub skip: FidCurve,
    /// Vanilla's final score.
    pub target: f64,
    pub vanilla_steps_to_target: Option<usize>,
    pub skip_steps_to_target: Option<usize>,
    pub skip_reaches_target: bool,
}

/// Paired vanilla/skip curves per seed; both variants share init seed, data
/// order and evaluation noise.
pub fn convergence_compare(cfg: &ConvergenceConfig, seeds: &[u64], sched: &NoiseSchedule) -> Result<Vec<ConvergenceRun>> {
    seeds
        .iter()
        .map(|&seed| {
            let vanilla = fid_curve(cfg, Variant::Vanilla, seed, sched)?;
            let skip = fid_curve(cfg, Variant::Skip, seed, sched)?;
            let target = *vanilla.fid.last().ok_or_else(|| invalid("budget shorter than the eval cadence"))?;
            let skip_steps_to_target = skip.steps_to(target);
            Ok(ConvergenceRun {
                seed,
                target,
                vanilla_steps_to_target: vanilla.steps_to(target),
                skip_steps_to_target,
                skip_reaches_target: skip_steps_to_target.is_some(),
                vanilla,
                skip,
            })
        })
        .collect()
}

/// `seed,variant,step,fid` rows.
pub fn write_convergence_csv<W: Write>(runs: &[ConvergenceRun], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["seed", "variant", "step", "fid"])?;
    for run in runs {
        for (name, curve) in [("vanilla", &run.vanilla), ("skip", &run.skip)] {
            for (s, f) in curve.steps.iter().zip(&curve.fid) {
                out.write_record(&[run.seed.to_string(), name.to_string(), s.to_string(), f.to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
