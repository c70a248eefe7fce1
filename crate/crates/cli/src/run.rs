use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use skipdit::skipdit::{save_checkpoint, sidecar_path, EvalCount, SkipDiT};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Output directory bookkeeping: every file written through a `Run` is
/// declared in the manifest.
pub struct Run {
    out: PathBuf,
    outputs: Vec<String>,
    pub evals: EvalCount,
    quiet: bool,
    started: Instant,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    config_path: Option<String>,
    seed: u64,
    out_dir: String,
    version: &'static str,
    wall_clock_secs: f64,
    block_evals: u64,
    fusion_evals: u64,
    threads: usize,
    effective_config: Value,
    outputs: &'a [String],
}

pub struct ManifestInputs<'a> {
    pub subcommand: &'a str,
    pub config_path: Option<&'a Path>,
    pub seed: u64,
    pub threads: usize,
    pub effective_config: Value,
}

impl Run {
    pub fn new(out: &Path, quiet: bool) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            outputs: Vec::new(),
            evals: EvalCount::default(),
            quiet,
            started: Instant::now(),
        })
    }

    pub fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Declare `name` and return its path inside the output directory.
    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.out.join(name)
    }

    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        serde_json::to_writer_pretty(self.create(name)?, value)?;
        Ok(())
    }

    /// Declare a checkpoint archive and its JSON sidecar.
    pub fn model_path(&mut self, name: &str) -> PathBuf {
        self.path(&sidecar_path(Path::new(name)).to_string_lossy());
        self.path(name)
    }

    pub fn save_model(&mut self, name: &str, model: &SkipDiT) -> Result<()> {
        save_checkpoint(model, &self.model_path(name))?;
        Ok(())
    }

    pub fn finish(mut self, inputs: ManifestInputs<'_>) -> Result<()> {
        let manifest_path = self.path("manifest.json");
        let m = Manifest {
            subcommand: inputs.subcommand,
            config_path: inputs.config_path.map(|p| p.display().to_string()),
            seed: inputs.seed,
            out_dir: self.out.display().to_string(),
            version: VERSION,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            block_evals: self.evals.blocks,
            fusion_evals: self.evals.fusions,
            threads: inputs.threads,
            effective_config: inputs.effective_config,
            outputs: &self.outputs,
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(manifest_path)?), &m)?;
        Ok(())
    }
}
