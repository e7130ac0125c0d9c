use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("fit did not converge: {0}")]
    NotConverged(String),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Empty(_) => "empty",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::Format { .. } => "format",
            Error::Parse { .. } => "parse",
            Error::Degenerate(_) => "degenerate",
            Error::NotConverged(_) => "not_converged",
            Error::KeyMismatch(_) => "key_mismatch",
        }
    }
}
