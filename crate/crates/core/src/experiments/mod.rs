//! Orchestration: experiment configs, the end-to-end pipeline and the
//! baselines, the cloud-content sweep, and plot/CSV emission.

mod config;
mod models;
mod pipeline;
mod plots;
mod sweep;

pub use config::{
    DataSpec, DistillSwitches, EpochConfig, ExperimentConfig, Method, SourceTaskConfig,
};
pub use models::{evaluate, train_late_fusion, FinalModel};
pub use pipeline::{
    evaluate_run, prepare_dataset, pretrain_source, run_methods, run_pipeline, snapshot,
    PretrainCache, RunRecord, RunStatus, StageTiming, TeacherChecksums, DATA_CACHE_ENV,
};
pub use plots::{
    loss_plot_rows, plot_loss_trace, plot_sweep, read_plot_csv, sweep_plot_rows, LossPlotRow,
    SweepPlotRow, SweepPointKind, LOSS_PLOT_HEADER, SWEEP_PLOT_HEADER,
};
pub use sweep::{
    delta_summary, read_sweep_csv, sweep_cloud_content, write_sweep_csv, FractionDelta,
    SweepCell, SweepOutcome, SweepRow, SWEEP_HEADER,
};
