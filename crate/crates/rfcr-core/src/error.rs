//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data (clouds, labels, files) is malformed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A text file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A binary container failed to decode.
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training loss became non-finite or exceeded the divergence guard.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// An internal contract was violated (e.g. stale activation cache).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
