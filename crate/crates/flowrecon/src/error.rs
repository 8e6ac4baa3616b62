//! Crate-wide error type.

/// Errors produced by configuration, shape, numeric, and I/O failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad sizes, unknown identifiers, infeasible settings).
    #[error("configuration error: {0}")]
    Config(String),

    /// Shape or length mismatch between related values.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Non-finite or otherwise invalid numeric value encountered.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training loop aborted (divergence, NaN loss).
    #[error("training failed at step {step}: {message}")]
    Training { step: usize, message: String },

    /// Malformed input file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
