//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quantization: {0}")]
    Quant(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("graph validation failed at node {node}: {msg}")]
    Graph { node: usize, msg: String },

    #[error("shape error at node {node}: {msg}")]
    Shape { node: usize, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("data error at byte offset {offset}: {msg}")]
    DataAt { offset: u64, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has v{found}, expected v{expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("training aborted: {0}")]
    Train(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
