//! The diffusion transformer, in vanilla and long-skip variants.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, CheckpointMeta};
pub use config::{ModelConfig, Variant};
pub use model::{
    is_fusion_param, patch_index, timestep_embedding, unpatch_index, EvalCount, Features,
    FreezeMode, Pass, SkipDiT,
};
