use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Each variant maps onto one CLI exit code (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument fell outside its legal domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two grids (or tensors) that must agree in shape do not.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was invoked in a state that does not permit it.
    #[error("state error: {0}")]
    State(String),

    /// A file on disk could not be parsed.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Invalid configuration or command-line usage.
    #[error("config error: {0}")]
    Config(String),

    /// The two-phase training protocol was violated (e.g. no baseline anchor).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A loss or parameter became non-finite.
    #[error("numeric divergence: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 usage/config, 3 I/O or format, 4 protocol, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Shape(_) => 3,
            Error::Protocol(_) | Error::State(_) => 4,
            Error::Numeric(_) => 5,
        }
    }
}

pub(crate) fn ensure_domain(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Domain(msg()))
    }
}
