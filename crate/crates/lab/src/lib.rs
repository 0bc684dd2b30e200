//! Experiment harness: configuration files, leave-one-domain-out runs,
//! the ERM baseline, sweeps and report emission.

use std::path::PathBuf;

use thiserror::Error;

pub mod config;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, HeldOut, SweepParam};
pub use report::{emit_reports, write_manifest, Manifest};
pub use runner::{run_baseline_erm, run_experiment, sweep, RunResult, SweepRow};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] flair_core::Error),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl LabError {
    /// 1 for configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Core(flair_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}
