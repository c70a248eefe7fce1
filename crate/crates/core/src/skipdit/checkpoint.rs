use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SkipDiT};
use crate::error::Result;
use crate::ndkernel::ParamSet;

/// JSON written next to the parameter archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub bypass: bool,
}

/// `model.skdt` → `model.json`.
pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

/// Write the SKDT1 archive at `path` and its JSON sidecar.
pub fn save_checkpoint(model: &SkipDiT, path: &Path) -> Result<()> {
    model.params().write_archive(BufWriter::new(File::create(path)?))?;
    let meta = CheckpointMeta {
        config: model.config().clone(),
        bypass: model.bypass(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar_path(path))?), &meta)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SkipDiT> {
    let meta: CheckpointMeta =
        serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    let params = ParamSet::read_archive(BufReader::new(File::open(path)?))?;
    SkipDiT::from_parts(meta.config, params, meta.bypass)
}
