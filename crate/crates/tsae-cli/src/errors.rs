//! Error classification for the CLI: every error class maps to a distinct
//! exit code so scripts can tell configuration mistakes from corrupt
//! artifacts from chain mismatches.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration or arguments (exit 2).
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A required input file is missing or unreadable (exit 3).
    #[error("missing input {path}: {source}")]
    MissingInput {
        path: PathBuf,
        source: std::io::Error,
    },
    /// An artifact failed to parse or validate (exit 4).
    #[error("failed to read {path}: {message}")]
    BadArtifact { path: PathBuf, message: String },
    /// Chained artifacts do not hash-match (exit 5).
    #[error(
        "artifact chain mismatch: {artifact} was built against {expected}, \
         but {path} hashes to {found}"
    )]
    HashMismatch {
        artifact: String,
        path: PathBuf,
        expected: String,
        found: String,
    },
    /// Training or evaluation failed numerically (exit 6).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Anything else (exit 1).
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::MissingInput { .. } => 3,
            CliError::BadArtifact { .. } => 4,
            CliError::HashMismatch { .. } => 5,
            CliError::Numerical(_) => 6,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn bad_artifact(path: impl Into<PathBuf>, err: impl ToString) -> Self {
        CliError::BadArtifact {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
