use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid value: {0}")]
    Value(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("architecture token {position} ({token:?}): {reason}")]
    ArchToken {
        position: usize,
        token: String,
        reason: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
