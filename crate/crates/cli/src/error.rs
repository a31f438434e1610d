use era_core::Error;
use thiserror::Error;

/// Harness failures, one variant per process exit code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    /// Bad flags, config keys or values.
    #[error("{0}")]
    Usage(String),
    /// A loss or activation went non-finite.
    #[error("{0}")]
    Numeric(String),
    /// Missing, malformed or mismatched checkpoint.
    #[error("{0}")]
    Checkpoint(String),
    /// The finite-difference sweep found a wrong gradient.
    #[error("{0}")]
    GradCheck(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::GradCheck(_) => 5,
            CliError::Failure(_) => 1,
        }
    }

    pub fn from_core(e: Error) -> Self {
        match e {
            Error::Numeric { .. } => CliError::Numeric(format!("divergence: {e}")),
            Error::Parameter(_) | Error::Spec(_) => CliError::Usage(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }

    pub fn io(what: &str, path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Failure(format!("{what} {}: {e}", path.display()))
    }
}
