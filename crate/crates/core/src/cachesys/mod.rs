//! Skip-cached inference: plans, the cached sampler, the static-interval
//! baseline, calibration of the error record and phase, and cost accounting.

mod calibrate;
mod exec;
mod plan;
mod report;

pub use calibrate::{
    best_level, calibrate_error_record, consecutive_changes, detect_dynamic_phase, feature_heatmap,
    mean_consecutive_similarity, phase_from_deltas, read_record_csv, record_from_steps, resolve_plan,
    select_skip_level, trace_features, write_record_csv, CalibSample, Heatmap, LevelSimilarity, Trace,
};
pub use exec::{
    cached_sample, even_refresh_steps, policy_prediction_similarity, sample_with_policy, static_interval_baseline,
    static_matched_baseline,
    CachePolicy, CachedRun,
};
pub use plan::{
    count_block_evals, default_threshold, schedule_steps, static_interval_block_evals,
    window_for_fraction, BlockBudget, CachePlan, PlanFile, PlannedStep, StepKind,
};
pub use report::RunReport;
