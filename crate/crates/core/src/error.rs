use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// The network topology is malformed or an operation does not apply to it.
    #[error("structural error: {0}")]
    Structural(String),

    /// A shape or index disagrees with what the network declares.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An archive could not be decoded.
    #[error("format error in `{entry}`: {message}")]
    Format { entry: String, message: String },

    /// Input data violates a precondition (empty dataset, label out of range, ...).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(entry: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            entry: entry.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
