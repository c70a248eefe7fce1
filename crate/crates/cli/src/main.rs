mod cmds;
mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{CommandFactory, Parser, ValueEnum};

use cmds::*;
use run::{ManifestInputs, Run};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sub {
    Train,
    Continual,
    Sample,
    CacheRun,
    CacheBench,
    Calibrate,
    Phase,
    Heatmap,
    Landscape,
    Curves,
    Spectral,
    Theorems,
    Metrics,
    SelectLevel,
}

/// Experiments on a small diffusion transformer with long skip connections.
/// Every subcommand reads an optional JSON config and writes its outputs
/// plus `manifest.json` into `--out`.
#[derive(Debug, Parser)]
#[command(name = "skipdit", version = run::VERSION)]
struct Cli {
    #[arg(value_enum)]
    command: Sub,
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

/// Marks errors caused by the command line or the config file.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn threads() -> Result<usize> {
    match std::env::var("SKDT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(ConfigError(format!("SKDT_THREADS must be a positive integer, got `{v}`")).into()),
        },
    }
}

fn load_config<C: Command>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

fn execute<C: Command>(cli: &Cli, name: &str) -> Result<()> {
    let threads = threads()?;
    let mut cmd: C = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cmd.set_seed(s);
    }
    let mut run = Run::new(&cli.out, cli.quiet)?;
    cmd.run(&mut run)?;
    run.finish(ManifestInputs {
        subcommand: name,
        config_path: cli.config.as_deref(),
        seed: cmd.seed(),
        threads,
        effective_config: serde_json::to_value(&cmd)?,
    })
}

fn dispatch(cli: &Cli) -> Result<()> {
    let name = cli
        .command
        .to_possible_value()
        .map(|v| v.get_name().to_string())
        .unwrap_or_default();
    match cli.command {
        Sub::Train => execute::<TrainCmd>(cli, &name),
        Sub::Continual => execute::<ContinualCmd>(cli, &name),
        Sub::Sample => execute::<SampleCmd>(cli, &name),
        Sub::CacheRun => execute::<CacheRunCmd>(cli, &name),
        Sub::CacheBench => execute::<CacheBenchCmd>(cli, &name),
        Sub::Calibrate => execute::<CalibrateCmd>(cli, &name),
        Sub::Phase => execute::<PhaseCmd>(cli, &name),
        Sub::Heatmap => execute::<HeatmapCmd>(cli, &name),
        Sub::Landscape => execute::<LandscapeCmd>(cli, &name),
        Sub::Curves => execute::<CurvesCmd>(cli, &name),
        Sub::Spectral => execute::<SpectralCmd>(cli, &name),
        Sub::Theorems => execute::<TheoremsCmd>(cli, &name),
        Sub::Metrics => execute::<MetricsCmd>(cli, &name),
        Sub::SelectLevel => execute::<SelectLevelCmd>(cli, &name),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use skipdit::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return "config";
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Shape { .. } => "shape",
                E::InvalidArgument(_) => "invalid_argument",
                E::UnknownParam(_) => "unknown_param",
                E::UnknownLabel { .. } => "unknown_label",
                E::RequiresSkip(_) => "requires_skip",
                E::NotConverged { .. } => "not_converged",
                E::Diverged { .. } => "diverged",
                E::NotPsd { .. } => "not_psd",
                E::Archive(_) => "archive",
                E::Io(_) => "io",
                E::Json(_) => "json",
                E::Csv(_) => "csv",
            };
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
    }
    "other"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = serde_json::to_string(&e.kind().to_string()).unwrap_or_default();
            eprintln!("error: kind=usage msg={msg}");
            eprintln!("{}", e.render().to_string().trim_end());
            eprintln!("{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // The message is JSON-quoted so the first line stays parseable.
            let msg = serde_json::to_string(&format!("{e:#}")).unwrap_or_default();
            let kind = error_kind(&e);
            eprintln!("error: kind={kind} msg={msg}");
            if kind == "config" {
                eprintln!("{}", Cli::command().render_usage());
            }
            ExitCode::FAILURE
        }
    }
}
