//! Config-driven experiment runner for soft-label SGD studies.

pub mod config;
pub mod report;
pub mod run;
pub mod svg;
pub mod sweep;

use std::path::Path;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] bcp_distill::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} verification check(s) failed")]
    Verification(usize),
}

impl CliError {
    /// 1 for invalid input or I/O, 2 for a numeric failure during training,
    /// 3 for failed verification checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(bcp_distill::Error::NumericFailure { .. }) => 2,
            CliError::Verification(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}
