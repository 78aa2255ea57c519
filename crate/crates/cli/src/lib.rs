//! Batch front-end for the `warpred` simulator: experiment configs, the
//! experiment runner and the CSV artifacts it writes.

pub mod config;
pub mod experiment;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, Manifest, MetricsRow, RunOptions, StageError};
