use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Inputs of skip-cached sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachePlan {
    /// Cache interval `N`: one global step followed by up to `N - 1` local
    /// steps. `N = 1` disables caching.
    pub interval: usize,
    /// Inclusive timestep window `[t_lo, t_hi]` in which caching may happen.
    pub t_hi: usize,
    pub t_lo: usize,
    /// Per-timestep error record `R`, entry `t - 1` for timestep `t`.
    pub error_record: Vec<f64>,
    /// Timesteps forced to full inference.
    pub phase: BTreeSet<usize>,
    /// Accumulated-error budget; `None` never breaks.
    pub threshold: Option<f64>,
    /// Which long-skip pair brackets the cached region.
    pub level: usize,
}

impl CachePlan {
    /// Plan with no error record, no phase and no threshold.
    pub fn simple(interval: usize, t_hi: usize, t_lo: usize, timesteps: usize) -> Self {
        Self {
            interval,
            t_hi,
            t_lo,
            error_record: vec![0.0; timesteps],
            phase: BTreeSet::new(),
            threshold: None,
            level: 1,
        }
    }

    /// Checks against a schedule of `timesteps` steps.
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.interval == 0 {
            return Err(invalid("cache interval must be at least 1"));
        }
        if !(self.t_hi > self.t_lo && self.t_lo >= 1 && self.t_hi <= timesteps) {
            return Err(invalid(format!(
                "cache window [{}, {}] must satisfy 1 <= t_lo < t_hi <= {timesteps}",
                self.t_hi, self.t_lo
            )));
        }
        if self.error_record.len() != timesteps {
            return Err(invalid(format!(
                "error record has {} entries for {timesteps} timesteps",
                self.error_record.len()
            )));
        }
        if self.error_record.iter().any(|r| !(*r >= 0.0)) {
            return Err(invalid("error record entries must be non-negative"));
        }
        if let Some(&t) = self.phase.iter().find(|&&t| t == 0 || t > timesteps) {
            return Err(invalid(format!("phase timestep {t} outside 1..={timesteps}")));
        }
        if let Some(th) = self.threshold {
            if !(th >= 0.0) {
                return Err(invalid(format!("threshold {th} must be non-negative")));
            }
        }
        if self.level == 0 {
            return Err(invalid("skip level must be at least 1"));
        }
        Ok(())
    }

    pub fn in_window(&self, t: usize) -> bool {
        self.t_lo <= t && t <= self.t_hi
    }

    fn r(&self, t: usize) -> f64 {
        self.error_record[t - 1]
    }
}

/// Cached window covering the last `fraction` of the sampled timesteps
/// (at least two steps).
pub fn window_for_fraction(timesteps: &[usize], fraction: f64) -> Result<(usize, usize)> {
    if timesteps.len() < 2 || !(0.0..=1.0).contains(&fraction) {
        return Err(invalid("window needs two or more steps and a fraction in [0, 1]"));
    }
    let n = ((fraction * timesteps.len() as f64).round() as usize).clamp(2, timesteps.len());
    let span = &timesteps[timesteps.len() - n..];
    Ok((span[0], *span.last().expect("n >= 2")))
}

/// Default threshold: three times the mean of `R` over the sampled
/// timesteps inside the window (0 when none are).
pub fn default_threshold(record: &[f64], timesteps: &[usize], t_hi: usize, t_lo: usize) -> f64 {
    let vals: Vec<f64> = timesteps
        .iter()
        .filter(|&&t| t_lo <= t && t <= t_hi && t <= record.len())
        .map(|&t| record[t - 1])
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    3.0 * vals.iter().sum::<f64>() / vals.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// Outside the window: ordinary full inference.
    Full,
    /// Full inference that also refreshes the cached deep feature.
    Global,
    /// Shallow and deep blocks only, reusing the cached feature.
    Local,
}

/// One planned step with the accumulated error on entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedStep {
    pub t: usize,
    pub kind: StepKind,
    pub error_before: f64,
}

/// Step-by-step schedule of `plan` over a sampler's timesteps.
///
/// A local step at `t` happens only when a cache exists, fewer than `N - 1`
/// local steps followed the last global step, `t` is not in the phase, and
/// `ε + R(t)` stays within the threshold. Otherwise the step is global and
/// `ε` resets to 0. A local step adds `R(t)` to `ε`.
pub fn schedule_steps(plan: &CachePlan, timesteps: &[usize]) -> Result<Vec<PlannedStep>> {
    let total = plan.error_record.len();
    plan.validate(total)?;
    if let Some(&t) = timesteps.iter().find(|&&t| t == 0 || t > total) {
        return Err(invalid(format!("timestep {t} outside the plan's 1..={total}")));
    }
    let mut out = Vec::with_capacity(timesteps.len());
    let mut have_cache = false;
    let mut locals = 0;
    let mut eps = 0.0;
    for &t in timesteps {
        if !plan.in_window(t) {
            have_cache = false;
            eps = 0.0;
            out.push(PlannedStep {
                t,
                kind: StepKind::Full,
                error_before: 0.0,
            });
            continue;
        }
        let within_budget = plan.threshold.is_none_or(|th| eps + plan.r(t) <= th);
        let local = have_cache && locals + 1 < plan.interval && !plan.phase.contains(&t) && within_budget;
        if local {
            out.push(PlannedStep {
                t,
                kind: StepKind::Local,
                error_before: eps,
            });
            locals += 1;
            eps += plan.r(t);
        } else {
            eps = 0.0;
            out.push(PlannedStep {
                t,
                kind: StepKind::Global,
                error_before: 0.0,
            });
            have_cache = true;
            locals = 0;
        }
    }
    Ok(out)
}

/// Analytic cost of a schedule for one model pass per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockBudget {
    pub full_steps: usize,
    pub cached_steps: usize,
    pub block_evals: u64,
    pub fusion_evals: u64,
    pub uncached_block_evals: u64,
    pub speedup: f64,
}

/// Full and global steps cost `L` blocks and `L/2` fusions; a local step at
/// level `i` costs `2i` blocks and `i` fusions.
pub fn count_block_evals(plan: &CachePlan, timesteps: &[usize], depth: usize) -> Result<BlockBudget> {
    let steps = schedule_steps(plan, timesteps)?;
    let cached_steps = steps.iter().filter(|s| s.kind == StepKind::Local).count();
    let full_steps = steps.len() - cached_steps;
    let (l, i) = (depth as u64, plan.level as u64);
    let block_evals = full_steps as u64 * l + cached_steps as u64 * 2 * i;
    let fusion_evals = full_steps as u64 * (l / 2) + cached_steps as u64 * i;
    let uncached = steps.len() as u64 * l;
    Ok(BlockBudget {
        full_steps,
        cached_steps,
        block_evals,
        fusion_evals,
        uncached_block_evals: uncached,
        speedup: uncached as f64 / block_evals as f64,
    })
}

/// Block evaluations of the static-interval baseline: `ceil(steps / n) L`.
pub fn static_interval_block_evals(steps: usize, n: usize, depth: usize) -> u64 {
    (steps.div_ceil(n) * depth) as u64
}

/// JSON form of a plan: the error record lives in a separate CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanFile {
    pub interval: usize,
    /// `[t_hi, t_lo]`; `None` uses [`PlanFile::window_fraction`].
    pub window: Option<[usize; 2]>,
    pub window_fraction: f64,
    /// `None` applies [`default_threshold`]; use a huge value to disable.
    pub threshold: Option<f64>,
    /// Phase quantile; `None` or 0 disables the phase.
    pub quantile: Option<f64>,
    pub level: usize,
    /// CSV written by calibration (`t,r`); `None` calibrates on the fly.
    pub error_record: Option<String>,
}

impl Default for PlanFile {
    fn default() -> Self {
        Self {
            interval: 2,
            window: None,
            window_fraction: 0.65,
            threshold: None,
            quantile: None,
            level: 1,
            error_record: None,
        }
    }
}
