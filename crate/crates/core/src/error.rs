use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by all glyphgen modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {op} undefined at index {index} (value {value})")]
    Domain { op: &'static str, index: usize, value: f64 },

    #[error("invalid axis: {0}")]
    Axis(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse { path: PathBuf, offset: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
