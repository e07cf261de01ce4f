//! Metrics and the experiment harnesses built on them.

mod crosslingual;
mod metrics;
mod scaling;
mod sweep;

pub use crosslingual::{crosslingual_matrix, stratum_report, CrossLingualCell, CrossLingualMatrix, Drop};
pub use metrics::{
    evaluate, reports_csv, score_record, Metric, Metrics, MetricsReport, PromptScore, RecordScores, METRIC_NAMES, Z95,
};
pub use scaling::{scaling_curves, ScalingCurves, ScalingPoint, ScalingSchedule, MAX_EDITS};
pub use sweep::{k_sweep, KSweep};
