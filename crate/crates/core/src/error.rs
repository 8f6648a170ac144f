use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration or flag rejected during validation.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("non-finite loss at iteration {iteration}: {breakdown}")]
    NonFinite { iteration: usize, breakdown: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::InvalidInput(_) | Error::Config(_) | Error::Json(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
