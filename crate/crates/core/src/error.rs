use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed record: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {message}")]
    InvalidData { path: PathBuf, message: String },

    #[error("no dataset index found under {0}")]
    NoDataset(PathBuf),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn parse(path: &Path, err: impl std::fmt::Display) -> Self {
        Error::Parse { path: path.to_path_buf(), message: err.to_string() }
    }

    pub fn invalid(path: &Path, message: impl Into<String>) -> Self {
        Error::InvalidData { path: path.to_path_buf(), message: message.into() }
    }

    /// True for failures caused by bad input data rather than usage or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Parse { .. } | Error::InvalidData { .. } | Error::NoDataset(_))
    }
}
