//! Error types shared across the simulator.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor construction or operation with incompatible shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Rejected value at construction (non-finite entries, bad hyperparameter).
    #[error("invalid value: {0}")]
    Value(String),

    /// Configuration that fails validation before any compute runs.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or degenerate dataset input.
    #[error("data error: {0}")]
    Data(String),

    /// Token id outside the model vocabulary.
    #[error("vocabulary error: token id {token} >= vocab size {vocab}")]
    Vocabulary { token: u32, vocab: usize },

    /// Incompatible client updates or checkpoints (schema/shape mismatch on the wire).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A federated round that cannot proceed (e.g. no usable client updates).
    #[error("round error: {0}")]
    Round(String),

    /// Metric requested on an empty or unusable evaluation set.
    #[error("metric error: {0}")]
    Metric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
