//! Diffusion transformer with long skip connections, skip-cached
//! sampling, and spectral stability analysis, at desk scale.
//!
//! Modules:
//! - [`ndkernel`]: arrays, parameter sets, reverse/forward-mode autodiff.
//! - [`diffusion`]: noise schedules, DDPM/DDIM samplers, classifier-free guidance.
//! - [`skipdit`]: the transformer with optional long-skip fusion branches.
//! - [`cachesys`]: skip-cached inference, calibration, and cost accounting.
//! - [`stability`]: perturbation landscapes, spectral norms, ideal-model bounds.
//! - [`metrics`]: PSNR, SSIM, cosine similarity, Gaussian Fréchet distance.
//! - [`trainer`]: synthetic data, noise-prediction training, two-stage recipe.

pub mod cachesys;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod ndkernel;
pub mod skipdit;
pub mod stability;
pub mod trainer;

pub use error::{Error, Result};
pub use ndkernel::{Array, ParamSet, Tape, Var};
