use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },

    /// Manifest problems that can be pinned to one record.
    #[error("sample {sample_id}: {message}")]
    Sample { sample_id: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
