//! Shared decoder: fully connected layers mapping encoder features to class
//! logits. Both routes decode through the same parameter set.

use crate::autodiff::{Gradients, NodeId, Parameter, Tape};
use crate::model::encoder::AffineLayer;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    layers: Vec<AffineLayer>,
}

pub struct DecoderNodes {
    nodes: Vec<NodeId>,
}

impl DecoderParams {
    pub fn init(
        feature_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut in_dim = feature_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(AffineLayer::init(&format!("dec.fc{i}"), h, in_dim, rng));
            in_dim = h;
        }
        layers.push(AffineLayer::init(
            &format!("dec.fc{}", hidden.len()),
            num_classes,
            in_dim,
            rng,
        ));
        Self { layers }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> DecoderNodes {
        DecoderNodes {
            nodes: self.params().iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    pub fn accumulate(&mut self, nodes: &DecoderNodes, grads: &Gradients) {
        for (p, &n) in self.params_mut().into_iter().zip(&nodes.nodes) {
            p.accumulate(n, grads);
        }
    }

    /// Features -> logits. Hidden layers use tanh; the final layer is affine.
    pub fn decode(&self, tape: &mut Tape, nodes: &DecoderNodes, features: NodeId) -> NodeId {
        let last = self.layers.len() - 1;
        let mut cur = features;
        for i in 0..self.layers.len() {
            let w = nodes.nodes[2 * i];
            let b = nodes.nodes[2 * i + 1];
            let lin = tape.matvec(w, cur);
            cur = tape.add(lin, b);
            if i != last {
                cur = tape.tanh(cur);
            }
        }
        cur
    }
}
