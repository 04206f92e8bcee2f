//! Error types shared across the crate.

use thiserror::Error;

/// Library-wide error type.
///
/// The variant groups map onto process exit codes at the CLI boundary:
/// configuration problems, numeric failures, and I/O or file-format
/// problems are kept distinct so batch scripts can react to them.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad dimensions, unknown keys, out-of-range values.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure: divergence, empty/degenerate input, domain violations.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Underlying filesystem error.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// File exists but is not in the expected format.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Paired files disagree (length, sample rate).
    #[error("input mismatch: {0}")]
    Mismatch(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
