//! Crate-wide error type.
//!
//! Exit-code mapping for the CLI lives in `main.rs`: validation and usage
//! problems exit 1, numerical failures (NaN aborts) exit 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix shape mismatch. Both offending shapes are named.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value (caught at construction time).
    #[error("invalid config: {0}")]
    Config(String),

    /// Input file failed to parse.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A record or value violated a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Misuse of an API (e.g. backward called twice on one tape).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite value where one is not allowed; aborts training.
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
