//! Perturbation landscapes, caching-similarity curves, Jacobian spectral
//! norms, and the ideal contraction model with its reuse-interval bounds.

mod landscape;
mod spectral;
mod theory;

use serde::{Deserialize, Serialize};

pub use landscape::{
    caching_similarity_curve, landscape, landscape_with, perturb_params, Landscape, LandscapeGrid,
    PerturbationSpec, SimilarityCurve,
};
pub use spectral::{spectral_norm, spectral_norm_of, PowerIteration};
pub use theory::{
    cumulative_error, empirical_theorem1_check, ideal_layer_bound, ideal_model_bounds,
    max_reuse_interval, random_orthogonal, ChainConfig, IdealBounds, IdealModelSpec, ReuseInterval,
    Theorem1Report, REUSE_SLACK,
};

/// Collected analysis results; absent parts were not run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub landscape: Option<Landscape>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub curves: Vec<(String, SimilarityCurve)>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub spectral: Vec<Theorem1Report>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<IdealBounds>,
}
