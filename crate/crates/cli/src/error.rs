//! Error taxonomy mapped onto the exit-status convention: 0 success,
//! 2 infeasible design, 3 divergence threshold exceeded, 4 input or schema
//! error, 1 anything else (numerical failure, I/O).

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("infeasible design: {0}")]
    Infeasible(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Parse { .. } => 4,
            CliError::Infeasible(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Internal(_) => 1,
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn parse_err(path: &Path, reason: impl ToString) -> CliError {
    CliError::Parse { path: path.display().to_string(), reason: reason.to_string() }
}

pub fn internal<E>(e: E) -> CliError
where
    E: std::error::Error + Send + Sync + 'static,
{
    CliError::Internal(anyhow::Error::new(e))
}
