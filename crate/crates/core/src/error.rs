use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("variance must be strictly positive (dimension {index}, value {value:e})")]
    NonPositiveVariance { index: usize, value: f64 },

    /// Inputs that are individually valid but do not fit together, such as
    /// a checkpoint and a dataset of different widths.
    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(
        "tape was recorded against parameter version {tape}, parameters are at version {params}"
    )]
    StaleTape { tape: u64, params: u64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad failure class, used for CLI exit codes and FFI status codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config { .. } => ErrorKind::Usage,
            Error::DimensionMismatch { .. }
            | Error::Incompatible(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Data,
            Error::NonPositiveVariance { .. }
            | Error::Quadrature(_)
            | Error::NonFinite(_)
            | Error::StaleTape { .. } => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
