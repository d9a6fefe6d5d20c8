//! Experiment pipeline: pre-training the prior model, adaptive training of
//! the disturbance model under constrained planning, disturbance-grid
//! evaluation, ablation pairs, and prediction-error reports. All runs are
//! seed-deterministic; metric CSVs reproduce byte-for-byte.

pub mod config;
pub mod metrics;
pub mod pipeline;

pub use config::RunConfig;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("run error: {0}")]
    Run(String),
    #[error(transparent)]
    Core(#[from] sarl_core::CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Stable machine-readable category for the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Run(_) => "run",
            HarnessError::Core(_) => "core",
            HarnessError::Io(_) => "io",
        }
    }
}
