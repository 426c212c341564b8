//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BcafError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("grouping error: {0}")]
    Grouping(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BcafError>;

impl BcafError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        BcafError::Io {
            path: path.into(),
            source,
        }
    }
}
