use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, batch size, parameter range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A file could not be parsed as the expected dataset format.
    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    /// A training quantity became NaN or infinite.
    #[error("non-finite value in term `{term}`")]
    NonFinite { term: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn ingestion(path: impl Into<PathBuf>, msg: impl Into<String>) -> Error {
    Error::Ingestion { path: path.into(), message: msg.into() }
}
