use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {axis} expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("sequence too short for {context}: need at least {min} steps, got {got}")]
    TooShort {
        context: &'static str,
        min: usize,
        got: usize,
    },

    #[error("invalid value in {context}: {message}")]
    Invalid { context: &'static str, message: String },

    #[error("unknown phoneme id {id} (vocabulary size {vocab})")]
    UnknownPhoneme { id: usize, vocab: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("tensor format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("sample {id}: {field} {message}")]
    Record {
        id: String,
        field: &'static str,
        message: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(context: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            context,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
