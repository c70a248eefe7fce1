use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use skipdit::cachesys::{
    calibrate_error_record, feature_heatmap, phase_from_deltas, read_record_csv, resolve_plan,
    sample_with_policy, select_skip_level, static_matched_baseline, write_record_csv, CachePolicy, CalibSample,
    PlanFile, RunReport, StepKind,
};
use skipdit::diffusion::{initial_noise, Label, NoiseSchedule, SamplerConfig, ScheduleConfig};
use skipdit::metrics::{write_metric_rows_csv, MetricRow};
use skipdit::skipdit::{load_checkpoint, save_checkpoint, ModelConfig, SkipDiT, Variant};
use skipdit::stability::{
    caching_similarity_curve, cumulative_error, empirical_theorem1_check, ideal_model_bounds, landscape,
    max_reuse_interval, ChainConfig, IdealModelSpec, LandscapeGrid, PerturbationSpec, ReuseInterval,
};
use skipdit::trainer::{
    block_digest, convergence_compare, loss_continuity_ratio, toy_fid_eval, train_with, two_stage_continual,
    write_convergence_csv, write_loss_csv, write_ppm_grid, ConvergenceConfig, DatasetSpec, FusionInit, Projection,
    TrainConfig,
};

use crate::run::Run;

/// Data range of generated images (`[-1, 1]`).
const PEAK: f64 = 2.0;

pub trait Command: Serialize + for<'de> Deserialize<'de> + Default {
    fn seed(&self) -> u64;
    fn set_seed(&mut self, seed: u64);
    fn run(&self, run: &mut Run) -> Result<()>;
}

macro_rules! seeded {
    () => {
        fn seed(&self) -> u64 {
            self.seed
        }
        fn set_seed(&mut self, seed: u64) {
            self.seed = seed;
        }
    };
}

/// A checkpoint when given, otherwise a fresh model from `config` and `seed`.
fn load_model(checkpoint: &Option<PathBuf>, config: &ModelConfig, seed: u64) -> Result<SkipDiT> {
    match checkpoint {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display())),
        None => Ok(SkipDiT::new(config.clone(), seed)?),
    }
}

fn label_of(class: Option<usize>) -> Label {
    class.map_or(Label::Null, Label::Class)
}

/// `count` calibration inputs with noise seeded `seed + i` and labels cycling
/// through the model's classes.
fn calib_samples(model: &SkipDiT, count: usize, seed: u64) -> Vec<CalibSample> {
    let shape = model.config().image_shape();
    (0..count)
        .map(|i| CalibSample {
            x_start: initial_noise(&shape, seed.wrapping_add(i as u64)),
            label: Label::Class(i % model.config().num_classes),
        })
        .collect()
}

fn reseeded(sampler: &SamplerConfig, seed: u64) -> SamplerConfig {
    SamplerConfig { seed, ..sampler.clone() }
}

fn read_record(path: &Option<String>) -> Result<Option<Vec<f64>>> {
    path.as_ref()
        .map(|p| -> Result<Vec<f64>> {
            let f = File::open(p).with_context(|| format!("opening error record {p}"))?;
            Ok(read_record_csv(BufReader::new(f))?)
        })
        .transpose()
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmd {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Seeds the model init and the training RNG.
    pub seed: u64,
}

impl Command for TrainCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let sched = self.schedule.build()?;
        let mut model = SkipDiT::new(self.model.clone(), self.seed)?;
        let cfg = TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        };
        let losses = train_with(&mut model, &cfg, &sched, |step, m| {
            run.log(format!("step {step}: checkpoint"));
            save_checkpoint(m, &run.model_path(&format!("ckpt_{step:06}.skdt")))
        })?;
        write_loss_csv(&losses, run.create("loss.csv")?)?;
        run.save_model("model.skdt", &model)?;
        run.log(format!("final loss {:.5}", losses.last().copied().unwrap_or(f64::NAN)));
        Ok(())
    }
}

// ---------------------------------------------------------------- continual

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualCmd {
    /// Trained vanilla model; trained here with `vanilla_train` when absent.
    pub vanilla_checkpoint: Option<PathBuf>,
    /// Skip config; defaults to the vanilla config with the skip variant.
    pub model: Option<ModelConfig>,
    pub schedule: ScheduleConfig,
    pub vanilla_train: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub fusion_init: FusionInit,
    /// Steps averaged on each side of the stage boundary.
    pub continuity_window: usize,
    pub seed: u64,
}

impl Default for ContinualCmd {
    fn default() -> Self {
        Self {
            vanilla_checkpoint: None,
            model: None,
            schedule: ScheduleConfig::default(),
            vanilla_train: TrainConfig::default(),
            stage1: TrainConfig {
                steps: 500,
                ..TrainConfig::default()
            },
            stage2: TrainConfig {
                steps: 1500,
                ..TrainConfig::default()
            },
            fusion_init: FusionInit::Random,
            continuity_window: 50,
            seed: 0,
        }
    }
}

impl Command for ContinualCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let sched = self.schedule.build()?;
        let vanilla = match &self.vanilla_checkpoint {
            Some(p) => load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?,
            None => {
                let base = self.model.clone().unwrap_or_default().with_variant(Variant::Vanilla);
                let mut v = SkipDiT::new(base, self.seed)?;
                let cfg = TrainConfig {
                    seed: self.seed,
                    ..self.vanilla_train.clone()
                };
                let losses = train_with(&mut v, &cfg, &sched, |_, _| Ok(()))?;
                write_loss_csv(&losses, run.create("vanilla_loss.csv")?)?;
                run.save_model("vanilla.skdt", &v)?;
                v
            }
        };
        if vanilla.is_skip() {
            bail!(skipdit::Error::InvalidArgument("the starting checkpoint must be a vanilla model".into()));
        }
        let skip_cfg = self
            .model
            .clone()
            .unwrap_or_else(|| vanilla.config().clone())
            .with_variant(Variant::Skip);
        let s1 = TrainConfig {
            seed: self.seed.wrapping_add(1),
            ..self.stage1.clone()
        };
        let s2 = TrainConfig {
            seed: self.seed.wrapping_add(2),
            ..self.stage2.clone()
        };
        let out = two_stage_continual(&vanilla, &skip_cfg, &s1, &s2, self.fusion_init, self.seed, &sched)?;
        write_loss_csv(&out.stage1_losses, run.create("stage1_loss.csv")?)?;
        write_loss_csv(&out.stage2_losses, run.create("stage2_loss.csv")?)?;
        run.save_model("skip.skdt", &out.model)?;
        let w = self
            .continuity_window
            .min(out.stage1_losses.len())
            .min(out.stage2_losses.len());
        let ratio = loss_continuity_ratio(&out.stage1_losses, &out.stage2_losses, w).ok();
        run.write_json(
            "continual.json",
            &json!({
                "vanilla_block_digest": block_digest(&vanilla),
                "block_digest_before_stage1": out.block_digest_before,
                "block_digest_after_stage1": out.block_digest_after_stage1,
                "freeze_contract_held": out.block_digest_before == out.block_digest_after_stage1,
                "passthrough_max_diff": out.passthrough_max_diff,
                "continuity_window": w,
                "continuity_ratio": ratio,
            }),
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------- sample

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleCmd {
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub count: usize,
    /// Labels to cycle through; `null` entries are unconditional. Empty
    /// cycles through every class.
    pub labels: Vec<Option<usize>>,
    pub cols: usize,
    pub seed: u64,
}

impl Default for SampleCmd {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            count: 8,
            labels: Vec::new(),
            cols: 4,
            seed: 0,
        }
    }
}

impl Command for SampleCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let sched = self.schedule.build()?;
        let model = load_model(&self.checkpoint, &self.model, self.seed)?;
        let shape = model.config().image_shape();
        let labels: Vec<Label> = if self.labels.is_empty() {
            (0..model.config().num_classes).map(Label::Class).collect()
        } else {
            self.labels.iter().map(|l| label_of(*l)).collect()
        };
        let mut images = Vec::with_capacity(self.count);
        for i in 0..self.count {
            let s = self.seed.wrapping_add(i as u64);
            let r = sample_with_policy(
                &model,
                &initial_noise(&shape, s),
                labels[i % labels.len()],
                &CachePolicy::None,
                &reseeded(&self.sampler, s),
                &sched,
            )?;
            run.evals += r.evals;
            images.push(r.x0);
        }
        write_ppm_grid(&images, self.cols, run.create("samples.ppm")?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------- cache-run

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheRunCmd {
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub plan: PlanFile,
    pub label: Option<usize>,
    /// Calibration trajectories used when the plan has no error record.
    pub calib_samples: usize,
    pub seed: u64,
}

impl Default for CacheRunCmd {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            plan: PlanFile::default(),
            label: Some(0),
            calib_samples: 4,
            seed: 0,
        }
    }
}

fn kind_name(k: StepKind) -> &'static str {
    match k {
        StepKind::Full => "full",
        StepKind::Global => "global",
        StepKind::Local => "local",
    }
}

impl Command for CacheRunCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let sched = self.schedule.build()?;
        let model = load_model(&self.checkpoint, &self.model, self.seed)?;
        let cfg = reseeded(&self.sampler, self.seed);
        let calib = calib_samples(&model, self.calib_samples, self.seed.wrapping_add(1_000_000));
        let plan = resolve_plan(&self.plan, read_record(&self.plan.error_record)?, &model, &calib, &cfg, &sched)?;
        let x = initial_noise(&model.config().image_shape(), self.seed);
        let label = label_of(self.label);
        let reference = sample_with_policy(&model, &x, label, &CachePolicy::None, &cfg, &sched)?;
        let cached = sample_with_policy(&model, &x, label, &CachePolicy::SkipCache(plan.clone()), &cfg, &sched)?;
        run.evals += reference.evals;
        run.evals += cached.evals;
        let report = RunReport::compare(&cached, &reference.x0, reference.evals.blocks, PEAK)?;
        run.log(format!(
            "blocks {} / {} (speedup {:.3}), cosine {:.6}",
            report.block_evals, report.uncached_block_evals, report.speedup, report.cosine
        ));
        run.write_json(
            "report.json",
            &json!({
                "report": report,
                "window": [plan.t_hi, plan.t_lo],
                "threshold": plan.threshold,
                "phase": plan.phase,
                "level": plan.level,
                "interval": plan.interval,
            }),
        )?;
        let mut w = csv_writer(run, "steps.csv")?;
        w.write_record(["k", "t", "kind", "error_before"])?;
        for (k, s) in cached.steps.iter().enumerate() {
            w.write_record(&[k.to_string(), s.t.to_string(), kind_name(s.kind).into(), s.error_before.to_string()])?;
        }
        w.flush()?;
        write_record_csv(&plan.error_record, run.create("record.csv")?)?;
        write_ppm_grid(&[reference.x0, cached.x0], 2, run.create("uncached_vs_cached.ppm")?)?;
        Ok(())
    }
}

fn csv_writer(run: &mut Run, name: &str) -> Result<csv::Writer<std::io::BufWriter<File>>> {
    Ok(csv::Writer::from_writer(run.create(name)?))
}

// ---------------------------------------------------------------- cache-bench

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheBenchCmd {
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    /// Shared plan settings; the interval is swept.
    pub plan: PlanFile,
    pub intervals: Vec<usize>,
    pub seeds: usize,
    pub calib_samples: usize,
    pub seed: u64,
}

impl Default for CacheBenchCmd {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            plan: PlanFile::default(),
            intervals: vec![2, 3, 4],
            seeds: 16,
            calib_samples: 4,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct BenchSummary {
    interval: usize,
    mean_skip_psnr: f64,
    mean_static_psnr: f64,
    mean_skip_blocks: f64,
    skip_at_least_static: usize,
    seeds: usize,
}

/// PSNR with identical outputs capped at 100 dB so averages stay finite.
fn capped_psnr(r: &RunReport) -> f64 {
    r.psnr.unwrap_or(100.0).min(100.0)
}

impl Command for CacheBenchCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let sched = self.schedule.build()?;
        let model = load_model(&self.checkpoint, &self.model, self.seed)?;
        let calib = calib_samples(&model, self.calib_samples, self.seed.wrapping_add(1_000_000));
        // Calibrate once for the whole sweep.
        let record = match read_record(&self.plan.error_record)? {
            Some(r) => r,
            None => calibrate_error_record(&model, &calib, self.plan.level, &self.sampler, &sched)?,
        };
        let shape = model.config().image_shape();
        let mut w = csv_writer(run, "bench.csv")?;
        w.write_record(["seed", "interval", "policy", "block_evals", "psnr", "ssim", "cosine"])?;
        let mut summary = Vec::new();
        for &n in &self.intervals {
            let file = PlanFile {
                interval: n,
                ..self.plan.clone()
            };
            let plan = resolve_plan(&file, Some(record.clone()), &model, &calib, &self.sampler, &sched)?;
            let (mut ps, mut pst, mut blocks, mut wins) = (0.0, 0.0, 0.0, 0);
            for i in 0..self.seeds {
                let s = self.seed.wrapping_add(i as u64);
                let cfg = reseeded(&self.sampler, s);
                let x = initial_noise(&shape, s);
                let label = Label::Class(i % model.config().num_classes);
                let reference = sample_with_policy(&model, &x, label, &CachePolicy::None, &cfg, &sched)?;
                let skip = sample_with_policy(&model, &x, label, &CachePolicy::SkipCache(plan.clone()), &cfg, &sched)?;
                let per_pass = skip.evals.blocks / skip.passes as u64;
                let stat = static_matched_baseline(&model, &x, label, per_pass, &cfg, &sched)?;
                for r in [&reference, &skip, &stat] {
                    run.evals += r.evals;
                }
                let rs = RunReport::compare(&skip, &reference.x0, reference.evals.blocks, PEAK)?;
                let rt = RunReport::compare(&stat, &reference.x0, reference.evals.blocks, PEAK)?;
                for (name, r) in [("skip_cache", &rs), ("static_matched", &rt)] {
                    w.write_record(&[
                        s.to_string(),
                        n.to_string(),
                        name.into(),
                        r.block_evals.to_string(),
                        capped_psnr(r).to_string(),
                        r.ssim.to_string(),
                        r.cosine.to_string(),
                    ])?;
                }
                ps += capped_psnr(&rs);
                pst += capped_psnr(&rt);
                blocks += rs.block_evals as f64;
                wins += usize::from(capped_psnr(&rs) >= capped_psnr(&rt));
            }
            let k = self.seeds.max(1) as f64;
            summary.push(BenchSummary {
                interval: n,
                mean_skip_psnr: ps / k,
                mean_static_psnr: pst / k,
                mean_skip_blocks: blocks / k,
                skip_at_least_static: wins,
                seeds: self.seeds,
            });
            run.log(format!("N={n}: skip {:.2} dB, static {:.2} dB, wins {wins}/{}", ps / k, pst / k, self.seeds));
        }
        w.flush()?;
        run.write_json("summary.json", &summary)?;
        Ok(())
    }
}

// ---------------------------------------------------------------- calibrate / phase

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateCmd {
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub level: usize,
    pub samples: usize,
    /// Phase quantile (`phase` only).
    pub quantile: f64,
    pub seed: u64,
}

impl Default for CalibrateCmd {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            level: 1,
            samples: 8,
            quantile: 0.1,
            seed: 0,
        }
    }
}

impl CalibrateCmd {
    fn record(&self) -> Result<(Vec<f64>, Vec<usize>)> {
        let sched: NoiseSchedule = self.schedule.build()?;
        let model = load_model(&self.checkpoint, &self.model, self.seed)?;
        let calib = calib_samples(&model, self.samples, self.seed);
        let r = calibrate_error_record(&model, &calib, self.level, &self.sampler, &sched)?;
        Ok((r, self.sampler.timesteps(&sched)?))
    }
}

impl Command for CalibrateCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let (record, _) = self.record()?;
        write_record_csv(&record, run.create("record.csv")?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseCmd(pub CalibrateCmd);

impl Command for PhaseCmd {
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    fn run(&self, run: &mut Run) -> Result<()> {
        let (record, ts) = self.0.record()?;
        let deltas: Vec<f64> = ts.iter().map(|&t| record[t - 1]).collect();
        let phase = phase_from_deltas(&ts, &deltas, self.0.quantile)?;
        let mut w = csv_writer(run, "deltas.csv")?;
        w.write_record(["t", "delta", "in_phase"])?;
        for (t, d) in ts.iter().zip(&deltas) {
            w.write_record(&[t.to_string(), d.to_string(), phase.contains(t).to_string()])?;
        }
        w.flush()?;
        run.write_json("phase.json", &json!({ "quantile": self.0.quantile, "phase": phase }))?;
        Ok(())
    }
}

// ---------------------------------------------------------------- heatmap

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapCmd {
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub label: Option<usize>,
    pub seed: u64,
}

impl Command for HeatmapCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let sched = self.schedule.build()?;
        let model = load_model(&self.checkpoint, &self.model, self.seed)?;
        let sample = CalibSample {
            x_start: initial_noise(&model.config().image_shape(), self.seed),
            label: label_of(self.label),
        };
        let h = feature_heatmap(&model, &sample, &reseeded(&self.sampler, self.seed), &sched)?;
        h.write_csv(run.create("heatmap.csv")?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------- landscape

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeCmd {
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub t: usize,
    pub label: Option<usize>,
    /// Direction norm relative to the parameter norm.
    pub eps_norm: f64,
    pub extent: f64,
    pub grid: usize,
    pub seed: u64,
}

impl Default for LandscapeCmd {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model: ModelConfig::default(),
            t: 500,
            label: Some(0),
            eps_norm: 2e-2,
            extent: 1.0,
            grid: 11,
            seed: 0,
        }
    }
}

impl Command for LandscapeCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let model = load_model(&self.checkpoint, &self.model, self.seed)?;
        let x = initial_noise(&model.config().image_shape(), self.seed);
        let spec = PerturbationSpec::sample(model.params(), self.eps_norm, self.seed)?;
        let l = landscape(&model, &x, self.t, label_of(self.label), &spec, &LandscapeGrid::square(self.extent, self.grid))?;
        l.write_csv(run.create("landscape.csv")?)?;
        run.write_json("landscape.json", &json!({ "mean": l.mean(), "centre": centre(&l.values) }))?;
        Ok(())
    }
}

fn centre(values: &[Vec<f64>]) -> Option<f64> {
    let row = values.get(values.len() / 2)?;
    row.get(row.len() / 2).copied()
}

// ---------------------------------------------------------------- curves

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurvesCmd {
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub plan: PlanFile,
    pub samples: usize,
    pub seed: u64,
}

impl Default for CurvesCmd {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            plan: PlanFile {
                window_fraction: 1.0,
                threshold: Some(f64::MAX),
                ..PlanFile::default()
            },
            samples: 8,
            seed: 0,
        }
    }
}

impl Command for CurvesCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let sched = self.schedule.build()?;
        let model = load_model(&self.checkpoint, &self.model, self.seed)?;
        let samples = calib_samples(&model, self.samples, self.seed);
        let mut policies = vec![(
            format!("static_interval_{}", self.plan.interval),
            CachePolicy::StaticInterval(self.plan.interval),
        )];
        if model.is_skip() {
            let plan = resolve_plan(&self.plan, read_record(&self.plan.error_record)?, &model, &samples, &self.sampler, &sched)?;
            policies.insert(0, (format!("skip_cache_{}", self.plan.interval), CachePolicy::SkipCache(plan)));
        }
        let mut w = csv_writer(run, "curves.csv")?;
        w.write_record(["policy", "t", "mean", "std"])?;
        for (name, policy) in &policies {
            let c = caching_similarity_curve(&model, &samples, policy, &self.sampler, &sched)?;
            for k in 0..c.timesteps.len() {
                w.write_record(&[name.clone(), c.timesteps[k].to_string(), c.mean[k].to_string(), c.std[k].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------- spectral

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralCmd {
    pub depths: Vec<usize>,
    pub gammas: Vec<f64>,
    pub alpha_mix: f64,
    pub seeds: u64,
    pub chain: ChainConfig,
    pub seed: u64,
}

impl Default for SpectralCmd {
    fn default() -> Self {
        Self {
            depths: vec![4, 6, 8],
            gammas: vec![0.7, 0.9],
            alpha_mix: 0.5,
            seeds: 20,
            chain: ChainConfig::default(),
            seed: 0,
        }
    }
}

impl Command for SpectralCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let mut reports = Vec::new();
        for &depth in &self.depths {
            for &gamma in &self.gammas {
                for s in 0..self.seeds {
                    reports.push(empirical_theorem1_check(self.seed.wrapping_add(s), depth, gamma, self.alpha_mix, &self.chain)?);
                }
            }
        }
        let held = reports.iter().filter(|r| r.skip_below_vanilla).count();
        run.log(format!("skip below vanilla in {held}/{} chains", reports.len()));
        let mut w = csv_writer(run, "spectral.csv")?;
        w.write_record(["seed", "depth", "gamma", "alpha_mix", "sigma_vanilla", "sigma_skip", "skip_below_vanilla"])?;
        for r in &reports {
            w.write_record(&[
                r.seed.to_string(),
                r.depth.to_string(),
                r.gamma.to_string(),
                r.alpha_mix.to_string(),
                r.sigma_vanilla.to_string(),
                r.sigma_skip.to_string(),
                r.skip_below_vanilla.to_string(),
            ])?;
        }
        w.flush()?;
        run.write_json("spectral.json", &json!({ "held": held, "total": reports.len(), "reports": reports }))?;
        Ok(())
    }
}

// ---------------------------------------------------------------- theorems

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremsCmd {
    pub gamma: f64,
    #[serde(alias = "alpha")]
    pub alpha_mix: f64,
    #[serde(alias = "L")]
    pub depth: usize,
    /// Per-step perturbation for the reuse bounds.
    pub delta_step: f64,
    pub eps_max: f64,
    /// Reuse steps at which the cumulative error is tabulated.
    pub horizon: u32,
    pub seed: u64,
}

impl Default for TheoremsCmd {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            alpha_mix: 0.5,
            depth: 4,
            delta_step: 0.1,
            eps_max: 1.0,
            horizon: 10,
            seed: 0,
        }
    }
}

impl Command for TheoremsCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let spec = IdealModelSpec {
            depth: self.depth,
            gamma: self.gamma,
            alpha_mix: self.alpha_mix,
            delta_step: self.delta_step,
            eps_max: self.eps_max,
        };
        let b = ideal_model_bounds(&spec)?;
        let tau = |lip: f64| -> Result<ReuseInterval> { Ok(max_reuse_interval(lip, self.delta_step, self.eps_max)?) };
        let curve = |lip: f64| -> Result<Vec<f64>> {
            (1..=self.horizon)
                .map(|t| Ok(cumulative_error(lip, self.delta_step, t)?))
                .collect()
        };
        let out = json!({
            "spec": spec,
            "sigma_vanilla": b.sigma_vanilla,
            "sigma_skip_bound": b.sigma_skip_bound,
            "skip_bound_below_vanilla": b.sigma_skip_bound < b.sigma_vanilla,
            "tau_vanilla": tau(b.sigma_vanilla)?,
            "tau_skip": tau(b.sigma_skip_bound)?,
            "cumulative_error_vanilla": curve(b.sigma_vanilla)?,
            "cumulative_error_skip": curve(b.sigma_skip_bound)?,
        });
        run.log(format!("sigma_vanilla {:.6}, skip bound {:.6}", b.sigma_vanilla, b.sigma_skip_bound));
        run.write_json("theorems.json", &out)?;
        Ok(())
    }
}

// ---------------------------------------------------------------- metrics

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceCmd {
    pub config: ConvergenceConfig,
    pub seeds: Vec<u64>,
}

impl Default for ConvergenceCmd {
    fn default() -> Self {
        Self {
            config: ConvergenceConfig::default(),
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsCmd {
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub dataset: DatasetSpec,
    pub samples: usize,
    pub projection_dim: Option<usize>,
    /// Also run the paired vanilla/skip convergence comparison.
    pub convergence: Option<ConvergenceCmd>,
    pub seed: u64,
}

impl Default for MetricsCmd {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            dataset: DatasetSpec::default(),
            samples: 100,
            projection_dim: Some(16),
            convergence: None,
            seed: 0,
        }
    }
}

impl Command for MetricsCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let sched = self.schedule.build()?;
        let model = load_model(&self.checkpoint, &self.model, self.seed)?;
        let projection = self
            .projection_dim
            .map(|d| Projection::random(self.dataset.pixels(), d, self.seed))
            .transpose()?;
        let fid = toy_fid_eval(&model, &self.dataset, self.samples, &reseeded(&self.sampler, self.seed), &sched, projection.as_ref())?;
        run.log(format!("toy FID {fid:.5}"));
        let rows = [MetricRow {
            metric: "toy_fid".into(),
            value: fid,
            n_samples: self.samples,
            seed: self.seed,
        }];
        write_metric_rows_csv(&rows, run.create("metrics.csv")?)?;
        if let Some(conv) = &self.convergence {
            let runs = convergence_compare(&conv.config, &conv.seeds, &sched)?;
            write_convergence_csv(&runs, run.create("convergence.csv")?)?;
            let reached = runs.iter().filter(|r| r.skip_reaches_target).count();
            run.log(format!("skip reached the vanilla final score on {reached}/{} seeds", runs.len()));
            run.write_json("convergence.json", &json!({ "skip_reached": reached, "runs": runs }))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- select-level

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectLevelCmd {
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SelectLevelCmd {
    fn default() -> Self {
        Self {
            checkpoint: None,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            samples: 4,
            seed: 0,
        }
    }
}

impl Command for SelectLevelCmd {
    seeded!();

    fn run(&self, run: &mut Run) -> Result<()> {
        let sched = self.schedule.build()?;
        let model = load_model(&self.checkpoint, &self.model, self.seed)?;
        let samples = calib_samples(&model, self.samples, self.seed);
        let (best, table) = select_skip_level(&model, &samples, &self.sampler, &sched)?;
        let by_level: BTreeMap<usize, f64> = table.iter().map(|r| (r.level, r.similarity)).collect();
        run.write_json("levels.json", &json!({ "best": best, "similarity": by_level }))?;
        Ok(())
    }
}
