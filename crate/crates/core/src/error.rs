//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("non-finite values encountered in {context}")]
    NonFinite { context: String },

    #[error("unknown parameter `{name}` in {context}")]
    UnknownParameter { name: String, context: String },

    #[error("invalid argument for {context}: {detail}")]
    InvalidArgument { context: String, detail: String },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("queue size {queue} is not divisible by batch size {batch}")]
    QueueDivisibility { queue: usize, batch: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("manifest error at line {line}: {detail}")]
    ManifestLine { line: usize, detail: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { context: context.into(), detail: detail.into() }
    }

    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { context: context.into(), detail: detail.into() }
    }
}
