//! Experiment runner: configuration, seeded runs with periodic evaluation,
//! metrics CSV, checkpoints, and the comparison and sweep drivers behind the
//! CLI.

mod checkpoint;
mod config;
mod metrics;
mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{DatasetKind, DatasetSpec, ExperimentConfig, LabelBudget, SCHEMA_VERSION};
pub use metrics::{
    read_metrics_csv, write_metrics_csv, IntervalAccumulator, MetricsRow, METRICS_HEADER_COMMENT,
};
pub use run::{
    compare_policies, eval_accuracy, export_data, lambda_sweep, prepare_out_dir, run_experiment,
    ExperimentSummary, RunData, SeedRun, SeedSummary, SweepRow,
};
