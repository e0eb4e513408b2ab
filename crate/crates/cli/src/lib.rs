//! Experiment harness behind the `chmc` binary.
//!
//! Each subcommand reads an [`ExperimentConfig`], runs its grid of cells on a
//! worker pool and writes a CSV body (deterministic given config and seeds)
//! plus a JSON sidecar carrying timestamps, seeds and the resolved config.

pub mod commands;
pub mod config;
pub mod output;
pub mod runner;

pub use config::{ExperimentConfig, ModelId, SamplerConfig, SamplerId, SCHEMA_VERSION};

/// Failures of the harness; each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] chmc::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("output: {0}")]
    Output(String),
}

impl CliError {
    /// `2` for bad invocations, `1` for everything that went wrong later.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
