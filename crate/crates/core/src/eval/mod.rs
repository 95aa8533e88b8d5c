//! Evaluation: confusion matrices, OA / AA / Cohen's kappa, cloud-covered
//! vs cloud-free subset reports, and per-batch loss traces.

mod metrics;
mod trace;

pub use metrics::{
    confusion_matrix, metrics, read_metrics_file, subset_metrics, write_metrics_file,
    ConfusionMatrix, MetricsFile, MetricsReport, SubsetReports, SubsetTag,
};
pub use trace::{descent_gap, BatchRecord, EpochAggregate, LossTrace, TRACE_HEADER};
