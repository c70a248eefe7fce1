//! Fidelity metrics and the Gaussian Fréchet distance.

mod fidelity;
mod gaussian;
mod report;

pub use fidelity::{cosine_similarity, mse, psnr, ssim, SsimConfig};
pub use gaussian::{fit_gaussian, frechet_gaussian, sqrt_psd, GaussianStats, FRECHET_ROUNDOFF, PSD_TOL, SPECTRUM_FLOOR};
pub use report::{write_metric_rows_csv, MetricRow};
