use serde::{Deserialize, Serialize};

use super::CachedRun;
use crate::error::Result;
use crate::metrics::{cosine_similarity, psnr, ssim, SsimConfig};
use crate::ndkernel::Array;

/// Fidelity and cost of a cached run against its uncached reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub block_evals: u64,
    pub uncached_block_evals: u64,
    pub speedup: f64,
    /// `None` when the outputs are identical (infinite PSNR).
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub cosine: f64,
    pub identical: bool,
}

impl RunReport {
    /// `peak` is the data range used by PSNR and SSIM.
    pub fn compare(run: &CachedRun, reference: &Array, uncached_block_evals: u64, peak: f64) -> Result<Self> {
        let p = psnr(&run.x0, reference, peak)?;
        Ok(Self {
            block_evals: run.evals.blocks,
            uncached_block_evals,
            speedup: uncached_block_evals as f64 / run.evals.blocks as f64,
            psnr: p.is_finite().then_some(p),
            ssim: ssim(&run.x0, reference, &SsimConfig::for_range(peak))?,
            cosine: cosine_similarity(&run.x0, reference)?,
            identical: run.x0.bit_eq(reference),
        })
    }
}
