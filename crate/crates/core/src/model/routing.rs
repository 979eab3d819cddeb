//! Two-route gating policy: an affine map over the gate input followed by a
//! temperature softmax. Index 0 is the global route, index 1 the local route.

use crate::autodiff::{Gradients, NodeId, Parameter, Tape};
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPolicy {
    /// Gate weights, shape `[2, gate_input_dim]`.
    pub weights: Parameter,
    /// Gate bias, shape `[2]`.
    pub bias: Parameter,
    /// Softmax temperature; lower values sharpen the route choice.
    pub temperature: f64,
}

pub struct PolicyNodes {
    weights: NodeId,
    bias: NodeId,
}

impl RoutingPolicy {
    pub fn init(gate_input_dim: usize, temperature: f64, rng: &mut impl Rng) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::Value(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        if gate_input_dim == 0 {
            return Err(Error::Config("gate input dimension must be positive".into()));
        }
        Ok(Self {
            weights: Parameter::uniform_init(
                "policy.weights",
                vec![2, gate_input_dim],
                gate_input_dim,
                rng,
            ),
            bias: Parameter::uniform_init("policy.bias", vec![2], gate_input_dim, rng),
            temperature,
        })
    }

    pub fn gate_input_dim(&self) -> usize {
        self.weights.tensor.shape()[1]
    }

    /// `2 * gate_input_dim + 2`.
    pub fn param_count(&self) -> usize {
        self.weights.tensor.len() + self.bias.tensor.len()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weights, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape) -> PolicyNodes {
        PolicyNodes {
            weights: tape.leaf(&self.weights.tensor),
            bias: tape.leaf(&self.bias.tensor),
        }
    }

    pub fn accumulate(&mut self, nodes: &PolicyNodes, grads: &Gradients) {
        self.weights.accumulate(nodes.weights, grads);
        self.bias.accumulate(nodes.bias, grads);
    }

    /// Route probabilities for a gate input already on the tape. Returns the
    /// 2-vector node `softmax_tau(W g + b)`.
    pub fn route_probs(&self, tape: &mut Tape, nodes: &PolicyNodes, gate_input: NodeId) -> NodeId {
        assert_eq!(
            tape.value(gate_input).shape(),
            &[self.gate_input_dim()],
            "gate input dimension mismatch"
        );
        let lin = tape.matvec(nodes.weights, gate_input);
        let pre = tape.add(lin, nodes.bias);
        tape.softmax_tau(pre, self.temperature)
    }
}
