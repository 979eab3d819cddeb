//! Model architectures and the dynamic personalized model.
//!
//! A [`GlobalModel`] bundles an encoder, a shared decoder and (for sequence
//! tasks) an embedding table; it is the only state that ever crosses the
//! wire. A [`DynamicPersonalizedModel`] composes the global model with a
//! per-round finetuned local encoder copy and a two-route gating policy.

mod decoder;
mod dynamic;
mod embedding;
mod encoder;
mod routing;

pub mod checkpoint;

pub use decoder::{DecoderNodes, DecoderParams};
pub use dynamic::{
    regularized_loss, ClassifyForward, DynamicPersonalizedModel, EncoderCalls, GlobalModel,
    GlobalNodes, LocalParams, ModelBinding, ParamCounts, Route, RouteMode, RouteOverride,
    SequenceForward,
};
pub use embedding::{EmbeddingNodes, EmbeddingParams};
pub use encoder::{EncoderNodes, EncoderParams};
pub use routing::{PolicyNodes, RoutingPolicy};

use serde::{Deserialize, Serialize};

/// Recurrent cell variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// Gated cell with update/reset gates.
    #[default]
    Gru,
    /// Plain tanh recurrence.
    Vanilla,
}

/// Architecture family plus the dimensions specific to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// Token-sequence model: embedding -> recurrent cell -> decoder.
    Recurrent {
        vocab_size: usize,
        embed_dim: usize,
        cell: CellKind,
    },
    /// Flat-input model: affine+tanh stack -> decoder.
    FeedForward {
        input_dim: usize,
        /// Hidden layer widths between the input and the feature output.
        hidden: Vec<usize>,
    },
}

/// Full structural description of a model; every tensor shape follows from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// Feature dimension produced by the encoder.
    pub hidden_dim: usize,
    /// Output classes (equals the vocabulary size for sequence tasks).
    pub num_classes: usize,
    /// Hidden layer widths inside the decoder; empty means a single affine map.
    pub decoder_hidden: Vec<usize>,
}

impl ModelConfig {
    /// Input width of the routing gate: `embed_dim + hidden_dim` for
    /// recurrent models, the flattened input size for feed-forward ones.
    pub fn gate_input_dim(&self) -> usize {
        match &self.arch {
            ArchKind::Recurrent { embed_dim, .. } => embed_dim + self.hidden_dim,
            ArchKind::FeedForward { input_dim, .. } => *input_dim,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self.arch, ArchKind::Recurrent { .. })
    }

    pub fn vocab_size(&self) -> Option<usize> {
        match &self.arch {
            ArchKind::Recurrent { vocab_size, .. } => Some(*vocab_size),
            ArchKind::FeedForward { .. } => None,
        }
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        use crate::error::Error;
        if self.hidden_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("hidden_dim and num_classes must be positive".into()));
        }
        match &self.arch {
            ArchKind::Recurrent {
                vocab_size,
                embed_dim,
                ..
            } => {
                if *vocab_size < 2 {
                    return Err(Error::Config("vocab_size must be at least 2".into()));
                }
                if *embed_dim == 0 {
                    return Err(Error::Config("embed_dim must be positive".into()));
                }
                if self.num_classes != *vocab_size {
                    return Err(Error::Config(
                        "sequence models must have num_classes == vocab_size".into(),
                    ));
                }
            }
            ArchKind::FeedForward { input_dim, hidden } => {
                if *input_dim == 0 {
                    return Err(Error::Config("input_dim must be positive".into()));
                }
                if hidden.iter().any(|&h| h == 0) {
                    return Err(Error::Config("zero-width encoder hidden layer".into()));
                }
            }
        }
        if self.decoder_hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("zero-width decoder hidden layer".into()));
        }
        Ok(())
    }
}
