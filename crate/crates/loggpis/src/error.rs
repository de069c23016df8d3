//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value was outside the documented domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A derivative-block operation was requested from a kernel that cannot
    /// provide it.
    #[error("unsupported kernel operation: {0}")]
    UnsupportedKernel(String),

    /// Covariance factorization failed even at the maximum diagonal jitter.
    /// `condition` is a crude diagonal-ratio estimate of the conditioning.
    #[error(
        "factorization of a {size}-unknown system failed at maximum jitter \
         (diagonal ratio estimate {condition:.3e})"
    )]
    IllConditioned { size: usize, condition: f64 },

    /// A query was issued against a map with no usable cluster.
    #[error("map contains no usable cluster")]
    EmptyMap,

    /// A structured text file (PLY, CSV, config, map) failed to parse.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(path: &std::path::Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
