use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: {message}")]
    Record { path: PathBuf, message: String },

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("missing prerequisite checkpoint for stage `{stage}` (expected at {path})")]
    MissingPrerequisite { stage: String, path: PathBuf },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn record(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Record {
            path: path.into(),
            message: msg.into(),
        }
    }
}
