use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::plan::{default_threshold, window_for_fraction, CachePlan, PlanFile};
use crate::diffusion::{guided, run_sampler, Label, NoiseSchedule, SamplerConfig};
use crate::error::{invalid, Error, Result};
use crate::metrics::cosine_similarity;
use crate::ndkernel::Array;
use crate::skipdit::{Features, SkipDiT};

/// Starting noise and label of one calibration trajectory.
#[derive(Clone, Debug)]
pub struct CalibSample {
    pub x_start: Array,
    pub label: Label,
}

/// Features of the primary guidance pass at every step of an uncached run.
#[derive(Clone, Debug)]
pub struct Trace {
    pub timesteps: Vec<usize>,
    pub features: Vec<Features>,
    pub x0: Array,
}

/// Uncached sampling that records the features of the pass conditioned on
/// `label` (the null pass when the guidance scale is 0).
pub fn trace_features(
    model: &SkipDiT,
    sample: &CalibSample,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Trace> {
    let primary = if cfg.cfg_scale == 0.0 { Label::Null } else { sample.label };
    let mut features = Vec::new();
    let x0 = run_sampler(sched, cfg, &sample.x_start, |_, t, x| {
        guided(sample.label, cfg.cfg_scale, |lab| {
            let (eps, f) = model.forward_instrumented(x, t, lab)?;
            if lab == primary {
                features.push(f);
            }
            Ok(eps)
        })
    })?;
    Ok(Trace {
        timesteps: cfg.timesteps(sched)?,
        features,
        x0,
    })
}

fn change(a: &Array, b: &Array) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Mean over samples of `1 - cos(C_k, C_{k-1})` at each sampled step `k >= 1`,
/// where `C_k` is the step-`k` feature of one sample. Step 0 has no
/// predecessor and copies step 1; a single step yields `[0]`.
pub fn consecutive_changes(per_sample: &[Vec<Array>]) -> Result<Vec<f64>> {
    let first = per_sample.first().ok_or_else(|| invalid("no calibration samples"))?;
    let steps = first.len();
    if steps == 0 || per_sample.iter().any(|s| s.len() != steps) {
        return Err(invalid("calibration samples must share a non-empty step count"));
    }
    let mut out = vec![0.0; steps];
    for k in 1..steps {
        let mut acc = 0.0;
        for s in per_sample {
            acc += change(&s[k], &s[k - 1])?;
        }
        out[k] = acc / per_sample.len() as f64;
    }
    if steps > 1 {
        out[0] = out[1];
    }
    Ok(out)
}

/// Spread per-step values onto a length-`total` record indexed by `t - 1`;
/// unsampled timesteps get 0.
pub fn record_from_steps(timesteps: &[usize], per_step: &[f64], total: usize) -> Result<Vec<f64>> {
    if timesteps.len() != per_step.len() {
        return Err(invalid("timestep and value counts differ"));
    }
    let mut r = vec![0.0; total];
    for (&t, &v) in timesteps.iter().zip(per_step) {
        if t == 0 || t > total {
            return Err(invalid(format!("timestep {t} outside 1..={total}")));
        }
        r[t - 1] = v;
    }
    Ok(r)
}

fn deep_features(traces: &[Trace], level: usize) -> Vec<Vec<Array>> {
    traces
        .iter()
        .map(|tr| {
            tr.features
                .iter()
                .map(|f| f.cache_at_level(level).expect("level checked").clone())
                .collect()
        })
        .collect()
}

fn traces(model: &SkipDiT, samples: &[CalibSample], cfg: &SamplerConfig, sched: &NoiseSchedule) -> Result<Vec<Trace>> {
    if samples.is_empty() {
        return Err(invalid("calibration needs at least one sample"));
    }
    samples.iter().map(|s| trace_features(model, s, cfg, sched)).collect()
}

/// Error record `R`: per-timestep mean change of the level-`level` deep
/// feature along uncached runs. Length `T`.
pub fn calibrate_error_record(
    model: &SkipDiT,
    samples: &[CalibSample],
    level: usize,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    model.check_level(level)?;
    let tr = traces(model, samples, cfg, sched)?;
    let per_step = consecutive_changes(&deep_features(&tr, level))?;
    record_from_steps(&tr[0].timesteps, &per_step, sched.len())
}

/// The `round(q n)` timesteps with the largest deltas; ties go to the earlier
/// (larger) timestep.
pub fn phase_from_deltas(timesteps: &[usize], deltas: &[f64], q: f64) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("quantile {q} outside [0, 1]")));
    }
    if timesteps.len() != deltas.len() {
        return Err(invalid("timestep and delta counts differ"));
    }
    let mut order: Vec<usize> = (0..timesteps.len()).collect();
    order.sort_by(|&a, &b| {
        deltas[b]
            .total_cmp(&deltas[a])
            .then(timesteps[b].cmp(&timesteps[a]))
    });
    let take = (q * timesteps.len() as f64).round() as usize;
    Ok(order[..take].iter().map(|&i| timesteps[i]).collect())
}

/// Dynamic phase from the deep-feature change along uncached runs.
pub fn detect_dynamic_phase(
    model: &SkipDiT,
    samples: &[CalibSample],
    level: usize,
    q: f64,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<BTreeSet<usize>> {
    model.check_level(level)?;
    let tr = traces(model, samples, cfg, sched)?;
    let deltas = consecutive_changes(&deep_features(&tr, level))?;
    phase_from_deltas(&tr[0].timesteps, &deltas, q)
}

/// Concrete plan from a plan file. Without `record` the error record is
/// calibrated on `samples`; a positive phase quantile detects the phase on
/// them too.
pub fn resolve_plan(
    file: &PlanFile,
    record: Option<Vec<f64>>,
    model: &SkipDiT,
    samples: &[CalibSample],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<CachePlan> {
    model.check_level(file.level)?;
    let ts = cfg.timesteps(sched)?;
    let (t_hi, t_lo) = match file.window {
        Some([hi, lo]) => (hi, lo),
        None => window_for_fraction(&ts, file.window_fraction)?,
    };
    let error_record = match record {
        Some(r) => r,
        None => calibrate_error_record(model, samples, file.level, cfg, sched)?,
    };
    let phase = match file.quantile {
        Some(q) if q > 0.0 => detect_dynamic_phase(model, samples, file.level, q, cfg, sched)?,
        _ => BTreeSet::new(),
    };
    let plan = CachePlan {
        interval: file.interval,
        t_hi,
        t_lo,
        threshold: None,
        error_record,
        phase,
        level: file.level,
    };
    plan.validate(sched.len())?;
    Ok(CachePlan {
        threshold: Some(file.threshold.unwrap_or_else(|| default_threshold(&plan.error_record, &ts, t_hi, t_lo))),
        ..plan
    })
}

/// Layer × step matrix of `1 - cos(block_l at step k, block_l at step k-1)`
/// for `k = 1..S-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Later timestep of each column pair.
    pub timesteps: Vec<usize>,
    /// `values[l - 1][k - 1]` for block `l`, step `k`.
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn from_trace(trace: &Trace) -> Result<Self> {
        let depth = trace.features.first().map_or(0, |f| f.blocks.len());
        let mut values = vec![Vec::new(); depth];
        for k in 1..trace.features.len() {
            for (l, row) in values.iter_mut().enumerate() {
                row.push(change(
                    &trace.features[k].blocks[l],
                    &trace.features[k - 1].blocks[l],
                )?);
            }
        }
        Ok(Self {
            timesteps: trace.timesteps.iter().skip(1).copied().collect(),
            values,
        })
    }

    /// Header `layer,t<t_1>,...`, one row per block.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["layer".to_string()];
        header.extend(self.timesteps.iter().map(|t| format!("t{t}")));
        out.write_record(&header)?;
        for (l, row) in self.values.iter().enumerate() {
            let mut rec = vec![(l + 1).to_string()];
            rec.extend(row.iter().map(f64::to_string));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn feature_heatmap(
    model: &SkipDiT,
    sample: &CalibSample,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Heatmap> {
    Heatmap::from_trace(&trace_features(model, sample, cfg, sched)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSimilarity {
    pub level: usize,
    /// Mean cosine similarity of the cached feature between consecutive steps.
    pub similarity: f64,
}

/// Candidate levels `1..=min(3, L/2)`, scored by the mean consecutive-step
/// cosine of their cached feature. Returns the best (ties to the smaller
/// level) with the full table.
pub fn select_skip_level(
    model: &SkipDiT,
    samples: &[CalibSample],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<(usize, Vec<LevelSimilarity>)> {
    if !model.is_skip() {
        return Err(Error::RequiresSkip("select_skip_level"));
    }
    let tr = traces(model, samples, cfg, sched)?;
    let max_level = 3.min(model.config().depth / 2);
    let mut table = Vec::with_capacity(max_level);
    for level in 1..=max_level {
        table.push(LevelSimilarity {
            level,
            similarity: mean_consecutive_similarity(&deep_features(&tr, level))?,
        });
    }
    Ok((best_level(&table), table))
}

pub fn best_level(table: &[LevelSimilarity]) -> usize {
    let mut best = &table[0];
    for row in &table[1..] {
        if row.similarity > best.similarity {
            best = row;
        }
    }
    best.level
}

/// Mean over samples and steps `k >= 1` of `cos(C_k, C_{k-1})`; 1 for
/// single-step runs.
pub fn mean_consecutive_similarity(per_sample: &[Vec<Array>]) -> Result<f64> {
    let (mut acc, mut n) = (0.0, 0usize);
    for s in per_sample {
        for k in 1..s.len() {
            acc += cosine_similarity(&s[k], &s[k - 1])?;
            n += 1;
        }
    }
    Ok(if n == 0 { 1.0 } else { acc / n as f64 })
}

/// `t,r` rows for every timestep.
pub fn write_record_csv<W: Write>(record: &[f64], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "r"])?;
    for (i, r) in record.iter().enumerate() {
        out.write_record(&[(i + 1).to_string(), r.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_record_csv<R: std::io::Read>(r: R) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<(usize, f64)>().enumerate() {
        let (t, v) = row?;
        if t != i + 1 {
            return Err(invalid(format!("error record row {} holds timestep {t}", i + 1)));
        }
        out.push(v);
    }
    Ok(out)
}
