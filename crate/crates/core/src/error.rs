//! Error type shared across the toolkit.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, shape mismatch, or out-of-range parameter.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values or numeric breakdown during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training failed (divergence, NaN loss).
    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    /// File I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint or data file failed an integrity check.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Checkpoint schema version is not loadable by this build.
    #[error("version mismatch: file has schema v{found}, this build reads v{expected}; no migration path")]
    Version { found: u32, expected: u32 },

    /// Image decode/encode failure.
    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code for the CLI: 2 validation, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Version { .. } => 2,
            Error::Numeric(_) | Error::Training { .. } => 3,
            Error::Io(_) | Error::Integrity(_) | Error::Image(_) => 4,
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
