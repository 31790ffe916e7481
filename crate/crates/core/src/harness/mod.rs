//! Experiment configs, runs, sweeps and the acceptance suite.

pub mod acceptance;
pub mod config;
pub mod runner;
pub mod sweep;

pub use acceptance::{verify, AcceptanceReport, Level, Verdict};
pub use config::{ExperimentConfig, FitRequest, InitSpec};
pub use runner::{run_experiment, run_to_dir, RunOutcome, RunSummary, SCHEMA_VERSION};
pub use sweep::{run_sweep, SweepReport};
