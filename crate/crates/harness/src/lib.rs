//! Experiment harness for mollified networks: synthetic tasks, a training
//! driver with per-epoch CSV metrics, SVG curves and a command-line oracle
//! for Monte Carlo smoothing.

pub mod config;
pub mod metrics;
pub mod oracle_cli;
pub mod plot;
pub mod tasks;
pub mod train;

pub use config::{AnnealLoss, Baseline, ConfigError, RunConfig, Task};
pub use train::{run_experiment, run_seed, RunError, RunSummary, SeedReport};
