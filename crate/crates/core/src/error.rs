//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside a function's mathematical domain.
    #[error("domain error in {func}: {msg}")]
    Domain { func: &'static str, msg: String },

    /// A matrix expected to be symmetric positive definite was not
    /// (Cholesky factorization hit a non-positive pivot).
    #[error("matrix is not symmetric positive definite (pivot {pivot} at row {row})")]
    NotSpd { row: usize, pivot: f64 },

    /// Invalid argument (sizes, ranges, NaN inputs).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A responsibility update had no valid support to normalize over.
    #[error("degenerate weights: {0}")]
    Degenerate(String),

    /// A data file failed to parse.
    #[error("parse error in {path} at {location}: {msg}")]
    Parse {
        path: String,
        location: String,
        msg: String,
    },

    /// Snapshot bytes did not match the documented container layout.
    #[error("snapshot format error: {0}")]
    SnapshotFormat(String),

    /// Configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(func: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            func,
            msg: msg.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
