use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cachesys::{policy_prediction_similarity, CachePolicy, CalibSample};
use crate::diffusion::{Label, NoiseSchedule, SamplerConfig};
use crate::error::{invalid, Result};
use crate::metrics::cosine_similarity;
use crate::ndkernel::{Array, ParamSet};
use crate::skipdit::SkipDiT;

/// Two random directions in parameter space, each rescaled to global norm
/// `eps_norm * |θ|`.
#[derive(Clone, Debug)]
pub struct PerturbationSpec {
    pub delta: ParamSet,
    pub eta: ParamSet,
    pub eps_norm: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn sample(theta: &ParamSet, eps_norm: f64, seed: u64) -> Result<Self> {
        if !(eps_norm >= 0.0 && eps_norm.is_finite()) {
            return Err(invalid(format!("perturbation scale {eps_norm} must be >= 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = eps_norm * theta.global_norm();
        let mut draw = || {
            let mut d: ParamSet = theta
                .iter()
                .map(|(n, a)| (n.to_string(), Array::randn(a.shape().to_vec(), &mut rng)))
                .collect();
            let norm = d.global_norm();
            d.scale(if norm > 0.0 { target / norm } else { 0.0 });
            d
        };
        let delta = draw();
        let eta = draw();
        Ok(Self {
            delta,
            eta,
            eps_norm,
            seed,
        })
    }
}

/// `θ + α δ + β η`.
pub fn perturb_params(theta: &ParamSet, spec: &PerturbationSpec, alpha: f64, beta: f64) -> Result<ParamSet> {
    let mut out = theta.clone();
    out.add_scaled(&spec.delta, alpha)?;
    out.add_scaled(&spec.eta, beta)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl LandscapeGrid {
    /// `n` evenly spaced points on `[-extent, extent]` along both axes.
    pub fn square(extent: f64, n: usize) -> Self {
        let axis: Vec<f64> = if n <= 1 {
            vec![0.0]
        } else {
            (0..n)
                .map(|i| -extent + 2.0 * extent * i as f64 / (n - 1) as f64)
                .collect()
        };
        Self {
            alphas: axis.clone(),
            betas: axis,
        }
    }
}

/// Cosine similarity `L(α, β)` between `f(θ)` and `f(θ + αδ + βη)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub grid: LandscapeGrid,
    /// `values[i][j]` at `(alphas[i], betas[j])`.
    pub values: Vec<Vec<f64>>,
}

impl Landscape {
    pub fn mean(&self) -> f64 {
        let n: usize = self.values.iter().map(Vec::len).sum();
        self.values.iter().flatten().sum::<f64>() / n as f64
    }

    /// `alpha,beta,value` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["alpha", "beta", "value"])?;
        for (i, a) in self.grid.alphas.iter().enumerate() {
            for (j, b) in self.grid.betas.iter().enumerate() {
                out.write_record(&[a.to_string(), b.to_string(), self.values[i][j].to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Landscape of an arbitrary parameterised function.
pub fn landscape_with<F>(theta: &ParamSet, spec: &PerturbationSpec, grid: &LandscapeGrid, f: F) -> Result<Landscape>
where
    F: Fn(&ParamSet) -> Result<Array>,
{
    if grid.alphas.iter().chain(&grid.betas).any(|v| !v.is_finite()) {
        return Err(invalid("landscape grid must be finite"));
    }
    let base = f(theta)?;
    let mut values = Vec::with_capacity(grid.alphas.len());
    for &a in &grid.alphas {
        let mut row = Vec::with_capacity(grid.betas.len());
        for &b in &grid.betas {
            let out = f(&perturb_params(theta, spec, a, b)?)?;
            row.push(if out.bit_eq(&base) {
                1.0
            } else {
                cosine_similarity(&base, &out)?
            });
        }
        values.push(row);
    }
    Ok(Landscape {
        grid: grid.clone(),
        values,
    })
}

/// Landscape of the model's noise prediction at a fixed input.
pub fn landscape(
    model: &SkipDiT,
    x: &Array,
    t: usize,
    label: Label,
    spec: &PerturbationSpec,
    grid: &LandscapeGrid,
) -> Result<Landscape> {
    landscape_with(model.params(), spec, grid, |p| model.forward_with(p, x, t, label))
}

/// Per-timestep mean and spread of a similarity across samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub timesteps: Vec<usize>,
    pub mean: Vec<f64>,
    /// Sample standard deviation (`n - 1` denominator).
    pub std: Vec<f64>,
}

impl SimilarityCurve {
    pub fn from_samples(timesteps: Vec<usize>, per_sample: &[Vec<f64>]) -> Result<Self> {
        if per_sample.len() < 2 {
            return Err(invalid("a similarity curve needs at least 2 samples"));
        }
        let steps = timesteps.len();
        if per_sample.iter().any(|s| s.len() != steps) {
            return Err(invalid("per-sample curves must match the timestep count"));
        }
        let n = per_sample.len() as f64;
        let mut mean = vec![0.0; steps];
        let mut std = vec![0.0; steps];
        for k in 0..steps {
            let m = per_sample.iter().map(|s| s[k]).sum::<f64>() / n;
            let var = per_sample.iter().map(|s| (s[k] - m).powi(2)).sum::<f64>() / (n - 1.0);
            mean[k] = m;
            std[k] = var.sqrt();
        }
        Ok(Self { timesteps, mean, std })
    }

    /// `t,mean,std` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "mean", "std"])?;
        for k in 0..self.timesteps.len() {
            out.write_record(&[
                self.timesteps[k].to_string(),
                self.mean[k].to_string(),
                self.std[k].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Similarity between full and cached predictions at each step, aggregated
/// over `samples`.
pub fn caching_similarity_curve(
    model: &SkipDiT,
    samples: &[CalibSample],
    policy: &CachePolicy,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<SimilarityCurve> {
    let per_sample = samples
        .iter()
        .map(|s| policy_prediction_similarity(model, &s.x_start, s.label, policy, cfg, sched))
        .collect::<Result<Vec<_>>>()?;
    SimilarityCurve::from_samples(cfg.timesteps(sched)?, &per_sample)
}
