use std::path::Path;

use thiserror::Error;

/// CLI failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or values.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or inconsistent data: checkpoints, reports, traces.
    #[error("{0}")]
    Data(String),
    /// Everything else, I/O included.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn io(path: &Path, action: &str, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{action} {}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
