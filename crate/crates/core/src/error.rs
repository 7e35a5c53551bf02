use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not compose; the message names both shapes.
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown gradient-check operation `{0}`")]
    UnknownOp(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { path: String, stored: u32, computed: u32 },

    #[error("training diverged at step {step}: loss is {loss} (batch items: {items:?})")]
    NonFiniteLoss { step: u64, loss: f64, items: Vec<String> },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("{path}: {source}")]
    File { path: String, source: io::Error },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
