//! Error type for the command line tools, carrying the process exit code.

use thiserror::Error;

/// Tool-level failures, bucketed by exit code: configuration problems exit
/// with 2, numeric blow-ups with 3, filesystem trouble with 4.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<sketchfed::Error> for CliError {
    fn from(e: sketchfed::Error) -> Self {
        match &e {
            sketchfed::Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
