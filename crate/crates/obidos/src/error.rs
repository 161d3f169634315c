//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid replicaset: {0}")]
    InvalidReplicaSet(String),

    #[error("source {0} not in replicaset")]
    SourceNotInReplicaSet(String),

    #[error("deserialize error at byte {offset}: {message}")]
    Deserialize { offset: usize, message: String },

    #[error("path not found: {0}")]
    PathNotFound(String),

    #[error("source unavailable: {0}")]
    SourceUnavailable(String),

    #[error("generator refused: {0}")]
    GeneratorRefused(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("blob not found: {0}")]
    BlobNotFound(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("unknown replicaset: {0}")]
    UnknownReplicaSet(String),

    #[error("duplicate replicaset: {0}")]
    DuplicateReplicaSet(String),

    #[error("share failed: {0}")]
    ShareFailed(String),

    #[error("access denied: {0}")]
    AccessDenied(String),

    #[error("sender unavailable: {0}")]
    SenderUnavailable(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
