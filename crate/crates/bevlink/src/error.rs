//! Crate-wide error type. Variants map onto the CLI exit codes.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Rejected configuration, malformed input, or a dataset that fails a
    /// structural check (e.g. label-class starvation).
    #[error("validation: {0}")]
    Validation(String),

    /// Corrupt or truncated on-disk artifact.
    #[error("format: {0}")]
    Format(String),

    /// Training produced a non-finite loss or activation.
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for the CLI: 3 i/o, 4 validation, 5 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Validation(_) | Error::Format(_) => 4,
            Error::Divergence(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
