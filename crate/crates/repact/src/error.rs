//! Crate-wide error type.
//!
//! Variants are grouped by how a caller should react: `Invalid` and `Config`
//! are caller mistakes, `Io`/`Format` are broken or missing files, `Numeric`
//! is a runtime numeric failure (NaN loss, tolerance violation). The CLI maps
//! these groups onto its exit-code contract.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid argument, shape, or state.
    #[error("{0}")]
    Invalid(String),

    /// Experiment configuration rejected.
    #[error("config: {0}")]
    Config(String),

    /// Filesystem failure.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed data file; `offset` is the byte at which the problem was found.
    #[error("{path}: byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Numeric failure such as a NaN loss or a verification tolerance violation.
    #[error("{0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
