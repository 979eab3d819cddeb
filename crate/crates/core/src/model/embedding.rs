//! Token embedding table for sequence tasks. Stays inside the global model;
//! it is never copied into the local parameters.

use crate::autodiff::{Gradients, NodeId, Parameter, Tape};
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub table: Parameter,
}

pub struct EmbeddingNodes {
    table: NodeId,
}

impl EmbeddingParams {
    pub fn init(vocab_size: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: Parameter::uniform_init("emb.table", vec![vocab_size, embed_dim], embed_dim, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.tensor.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.table.tensor.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> EmbeddingNodes {
        EmbeddingNodes {
            table: tape.leaf(&self.table.tensor),
        }
    }

    pub fn accumulate(&mut self, nodes: &EmbeddingNodes, grads: &Gradients) {
        self.table.accumulate(nodes.table, grads);
    }

    /// Row lookup for one token id.
    pub fn lookup(&self, tape: &mut Tape, nodes: &EmbeddingNodes, token: u32) -> Result<NodeId> {
        let vocab = self.vocab_size();
        if token as usize >= vocab {
            return Err(Error::Vocabulary { token, vocab });
        }
        Ok(tape.row(nodes.table, token as usize))
    }
}
