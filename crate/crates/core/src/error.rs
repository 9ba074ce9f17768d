//! Error types shared across the toolkit.

use thiserror::Error;

/// Errors produced by model, data, unlearning, and evaluation code.
#[derive(Error, Debug)]
pub enum Error {
    /// A configuration violates one of its invariants.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input (batch, label, shape, argument) is invalid.
    #[error("input error: {0}")]
    Input(String),

    /// A computation produced non-finite values.
    #[error("numerical error in `{tensor}`: {detail}")]
    Numerical { tensor: String, detail: String },

    /// A dataset bundle or manifest violates a split invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Underlying I/O failure.
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// A file has the wrong format or is corrupt.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
