//! Experiment orchestration: folds, schemes, metrics, checkpoints, reports.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
pub use config::{RunConfig, Scheme, DEFAULT_SEED};
pub use experiment::{run_experiment, run_experiment_on, ExperimentResults, FoldResult};
pub use metrics::{aggregate_folds, evaluate, Aggregate, ConfusionMatrix, Evaluation};
pub use report::{emit_report, load_results};
