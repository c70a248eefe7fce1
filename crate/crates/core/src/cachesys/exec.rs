use serde::{Deserialize, Serialize};

use super::plan::{schedule_steps, CachePlan, PlannedStep, StepKind};
use crate::diffusion::{guidance_labels, guided, run_sampler, Label, NoiseSchedule, SamplerConfig};
use crate::error::{invalid, Error, Result};
use crate::metrics::cosine_similarity;
use crate::ndkernel::Array;
use crate::skipdit::{EvalCount, SkipDiT};

/// Output of an instrumented sampling run.
#[derive(Clone, Debug)]
pub struct CachedRun {
    pub x0: Array,
    /// Blocks and fusions actually evaluated, over every guidance pass.
    pub evals: EvalCount,
    /// Model passes per step (2 under classifier-free guidance).
    pub passes: usize,
    pub steps: Vec<PlannedStep>,
}

/// How a sampler may reuse earlier computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    None,
    /// Long-skip caching of the deep feature.
    SkipCache(CachePlan),
    /// Evaluate every `n`-th step, reusing the last prediction in between.
    StaticInterval(usize),
}

fn check_skip_model(model: &SkipDiT, plan: &CachePlan) -> Result<()> {
    if !model.is_skip() {
        return Err(Error::RequiresSkip("cached_sample"));
    }
    if model.bypass() {
        return Err(invalid("cached sampling needs the fusion bypass off"));
    }
    model.check_level(plan.level)
}

/// Skip-cached sampling. Each guidance pass keeps its own cached feature.
pub fn cached_sample(
    model: &SkipDiT,
    x_start: &Array,
    label: Label,
    plan: &CachePlan,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<CachedRun> {
    check_skip_model(model, plan)?;
    if plan.error_record.len() != sched.len() {
        return Err(invalid(format!(
            "plan covers {} timesteps, schedule has {}",
            plan.error_record.len(),
            sched.len()
        )));
    }
    let steps = schedule_steps(plan, &cfg.timesteps(sched)?)?;
    let labels = guidance_labels(label, cfg.cfg_scale);
    let mut caches: Vec<Option<Array>> = vec![None; labels.len()];
    let mut evals = EvalCount::default();
    let x0 = run_sampler(sched, cfg, x_start, |k, t, x| {
        let kind = steps[k].kind;
        guided(label, cfg.cfg_scale, |lab| {
            let slot = labels.iter().position(|&l| l == lab).expect("guidance label");
            match kind {
                StepKind::Full => {
                    caches[slot] = None;
                    model.forward_counted(x, t, lab, &mut evals)
                }
                StepKind::Global => {
                    let (eps, c) = model.forward_caching(x, t, lab, plan.level, &mut evals)?;
                    caches[slot] = Some(c);
                    Ok(eps)
                }
                StepKind::Local => {
                    let c = caches[slot].as_ref().expect("planner emits local steps after a global");
                    model.forward_local(x, t, lab, plan.level, c, &mut evals)
                }
            }
        })
    })?;
    Ok(CachedRun {
        x0,
        evals,
        passes: labels.len(),
        steps,
    })
}

/// Static-interval reuse: the model runs at steps `0, n, 2n, ...` and the
/// guided prediction is reused for the steps in between.
pub fn static_interval_baseline(
    model: &SkipDiT,
    x_start: &Array,
    label: Label,
    n: usize,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<CachedRun> {
    if n == 0 {
        return Err(invalid("reuse interval must be at least 1"));
    }
    let refresh = (0..cfg.steps).map(|k| k % n == 0).collect();
    static_reuse(model, x_start, label, refresh, cfg, sched)
}

/// Steps at which a static schedule with `evals` full evaluations spread
/// evenly over `steps` refreshes its prediction (always including step 0).
pub fn even_refresh_steps(steps: usize, evals: usize) -> Vec<bool> {
    let m = evals.clamp(1, steps.max(1));
    let mut refresh = vec![false; steps];
    for j in 0..m {
        refresh[j * steps / m] = true;
    }
    refresh
}

/// Static full-prediction reuse at a block budget matched to `blocks_per_pass`:
/// `round(blocks_per_pass / L)` evenly spread full evaluations.
pub fn static_matched_baseline(
    model: &SkipDiT,
    x_start: &Array,
    label: Label,
    blocks_per_pass: u64,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<CachedRun> {
    let depth = model.config().depth as f64;
    let evals = (blocks_per_pass as f64 / depth).round() as usize;
    static_reuse(model, x_start, label, even_refresh_steps(cfg.steps, evals), cfg, sched)
}

fn static_reuse(
    model: &SkipDiT,
    x_start: &Array,
    label: Label,
    refresh: Vec<bool>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<CachedRun> {
    let ts = cfg.timesteps(sched)?;
    let mut evals = EvalCount::default();
    let mut stored: Option<Array> = None;
    let x0 = run_sampler(sched, cfg, x_start, |k, t, x| {
        if refresh[k] {
            let eps = guided(label, cfg.cfg_scale, |lab| model.forward_counted(x, t, lab, &mut evals))?;
            stored = Some(eps.clone());
            Ok(eps)
        } else {
            Ok(stored.clone().expect("step 0 evaluates"))
        }
    })?;
    let steps = ts
        .iter()
        .zip(&refresh)
        .map(|(&t, &r)| PlannedStep {
            t,
            kind: if r { StepKind::Full } else { StepKind::Local },
            error_before: 0.0,
        })
        .collect();
    Ok(CachedRun {
        x0,
        evals,
        passes: guidance_labels(label, cfg.cfg_scale).len(),
        steps,
    })
}

/// Sample under `policy`.
pub fn sample_with_policy(
    model: &SkipDiT,
    x_start: &Array,
    label: Label,
    policy: &CachePolicy,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<CachedRun> {
    match policy {
        CachePolicy::None => static_interval_baseline(model, x_start, label, 1, cfg, sched),
        CachePolicy::SkipCache(plan) => cached_sample(model, x_start, label, plan, cfg, sched),
        CachePolicy::StaticInterval(n) => static_interval_baseline(model, x_start, label, *n, cfg, sched),
    }
}

/// Per-step cosine similarity between the full prediction and the
/// prediction `policy` would use, along the uncached trajectory from
/// `x_start`. Global and full steps score exactly 1.
pub fn policy_prediction_similarity(
    model: &SkipDiT,
    x_start: &Array,
    label: Label,
    policy: &CachePolicy,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let ts = cfg.timesteps(sched)?;
    let kinds: Vec<StepKind> = match policy {
        CachePolicy::None => vec![StepKind::Full; ts.len()],
        CachePolicy::SkipCache(plan) => {
            check_skip_model(model, plan)?;
            schedule_steps(plan, &ts)?.iter().map(|s| s.kind).collect()
        }
        CachePolicy::StaticInterval(n) => {
            if *n == 0 {
                return Err(invalid("reuse interval must be at least 1"));
            }
            (0..ts.len())
                .map(|k| if k % n == 0 { StepKind::Full } else { StepKind::Local })
                .collect()
        }
    };
    let level = match policy {
        CachePolicy::SkipCache(plan) => plan.level,
        _ => 1,
    };
    let labels = guidance_labels(label, cfg.cfg_scale);
    let mut caches: Vec<Option<Array>> = vec![None; labels.len()];
    let mut stored: Option<Array> = None;
    let mut sims = Vec::with_capacity(ts.len());
    let mut scratch = EvalCount::default();
    run_sampler(sched, cfg, x_start, |k, t, x| {
        let full = guided(label, cfg.cfg_scale, |lab| {
            let slot = labels.iter().position(|&l| l == lab).expect("guidance label");
            if kinds[k] == StepKind::Global {
                let (eps, c) = model.forward_caching(x, t, lab, level, &mut scratch)?;
                caches[slot] = Some(c);
                Ok(eps)
            } else {
                model.forward_counted(x, t, lab, &mut scratch)
            }
        })?;
        let reused = match (kinds[k], policy) {
            (StepKind::Local, CachePolicy::SkipCache(_)) => guided(label, cfg.cfg_scale, |lab| {
                let slot = labels.iter().position(|&l| l == lab).expect("guidance label");
                let c = caches[slot].as_ref().expect("local step follows a global one");
                model.forward_local(x, t, lab, level, c, &mut scratch)
            })?,
            (StepKind::Local, _) => stored.clone().expect("step 0 evaluates"),
            _ => {
                stored = Some(full.clone());
                full.clone()
            }
        };
        sims.push(if reused.bit_eq(&full) {
            1.0
        } else {
            cosine_similarity(&full, &reused)?
        });
        Ok(full)
    })?;
    Ok(sims)
}
