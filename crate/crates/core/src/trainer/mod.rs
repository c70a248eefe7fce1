//! Toy-scale training, the two-stage continual recipe and toy-FID runs.

mod continual;
mod dataset;
mod fid;
mod image;
mod train;

pub use continual::{block_digest, loss_continuity_ratio, two_stage_continual, ContinualOutcome, FusionInit};
pub use dataset::{DataStream, DatasetKind, DatasetSpec, Projection};
pub use fid::{
    convergence_compare, fid_curve, generate_samples, toy_fid_eval, toy_fid_from_samples, write_convergence_csv,
    ConvergenceConfig, ConvergenceRun, FidCurve,
};
pub use image::write_ppm_grid;
pub use train::{drop_label, mean_loss, noise_loss, train, train_with, write_loss_csv, Rmsprop, Stage, TrainConfig};
