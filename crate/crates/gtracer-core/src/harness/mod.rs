//! Experiment driver: dataset generation and ingestion, label-noise
//! injection, seed-controlled training runs and sweeps, metric persistence,
//! and geometry diagnostics at trained points.

pub mod config;
pub mod data;
pub mod diagnose;
pub mod idx;
pub mod record;
pub mod runner;
pub mod sweep;

pub use config::{ActivationSpec, DatasetSpec, ExperimentConfig, ModelSpec, ScheduleSpec};
pub use data::{flip_labels, make_dataset};
pub use diagnose::{diagnose, DiagnoseReport};
pub use record::{ReplicateSummary, RunRow, RunStatus, RunSummary};
pub use runner::{
    load_checkpoint, run_to_dir, save_checkpoint, split_batch, train_accuracies, train_on,
    train_single, TrainedRun,
};
pub use sweep::{sweep, SweepRow, SweepTable};
