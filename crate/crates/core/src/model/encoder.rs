//! Encoder parameter sets: recurrent cells and the feed-forward stack.
//!
//! The global and local encoders are the same type; a local encoder starts as
//! a deep copy of the global one and is finetuned in place.

use crate::autodiff::{Gradients, NodeId, Parameter, Tape};
use crate::model::{ArchKind, CellKind, ModelConfig};
use rand::Rng;

/// Gated recurrent cell: update gate, reset gate, candidate state.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_update: Parameter,
    pub u_update: Parameter,
    pub b_update: Parameter,
    pub w_reset: Parameter,
    pub u_reset: Parameter,
    pub b_reset: Parameter,
    pub w_cand: Parameter,
    pub u_cand: Parameter,
    pub b_cand: Parameter,
}

/// Plain tanh recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaCell {
    pub w_in: Parameter,
    pub u_rec: Parameter,
    pub bias: Parameter,
}

/// One affine layer of a feed-forward stack.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl AffineLayer {
    pub fn init(prefix: &str, out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Parameter::uniform_init(format!("{prefix}.w"), vec![out_dim, in_dim], in_dim, rng),
            bias: Parameter::uniform_init(format!("{prefix}.b"), vec![out_dim], in_dim, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderParams {
    Gru(GruCell),
    Vanilla(VanillaCell),
    FeedForward(Vec<AffineLayer>),
}

/// Leaf node ids for one encoder registration on a tape, in the same order
/// as [`EncoderParams::params`].
pub struct EncoderNodes {
    nodes: Vec<NodeId>,
}

impl EncoderParams {
    pub fn init(prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.hidden_dim;
        match &cfg.arch {
            ArchKind::Recurrent {
                embed_dim, cell, ..
            } => {
                let m = *embed_dim;
                match cell {
                    CellKind::Gru => EncoderParams::Gru(GruCell {
                        w_update: Parameter::uniform_init(format!("{prefix}.gru.w_update"), vec![d, m], m, rng),
                        u_update: Parameter::uniform_init(format!("{prefix}.gru.u_update"), vec![d, d], d, rng),
                        b_update: Parameter::uniform_init(format!("{prefix}.gru.b_update"), vec![d], d, rng),
                        w_reset: Parameter::uniform_init(format!("{prefix}.gru.w_reset"), vec![d, m], m, rng),
                        u_reset: Parameter::uniform_init(format!("{prefix}.gru.u_reset"), vec![d, d], d, rng),
                        b_reset: Parameter::uniform_init(format!("{prefix}.gru.b_reset"), vec![d], d, rng),
                        w_cand: Parameter::uniform_init(format!("{prefix}.gru.w_cand"), vec![d, m], m, rng),
                        u_cand: Parameter::uniform_init(format!("{prefix}.gru.u_cand"), vec![d, d], d, rng),
                        b_cand: Parameter::uniform_init(format!("{prefix}.gru.b_cand"), vec![d], d, rng),
                    }),
                    CellKind::Vanilla => EncoderParams::Vanilla(VanillaCell {
                        w_in: Parameter::uniform_init(format!("{prefix}.rnn.w_in"), vec![d, m], m, rng),
                        u_rec: Parameter::uniform_init(format!("{prefix}.rnn.u_rec"), vec![d, d], d, rng),
                        bias: Parameter::uniform_init(format!("{prefix}.rnn.bias"), vec![d], d, rng),
                    }),
                }
            }
            ArchKind::FeedForward { input_dim, hidden } => {
                let mut layers = Vec::new();
                let mut in_dim = *input_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    layers.push(AffineLayer::init(&format!("{prefix}.ff{i}"), h, in_dim, rng));
                    in_dim = h;
                }
                layers.push(AffineLayer::init(
                    &format!("{prefix}.ff{}", hidden.len()),
                    d,
                    in_dim,
                    rng,
                ));
                EncoderParams::FeedForward(layers)
            }
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            EncoderParams::Gru(c) => vec![
                &c.w_update, &c.u_update, &c.b_update, &c.w_reset, &c.u_reset, &c.b_reset,
                &c.w_cand, &c.u_cand, &c.b_cand,
            ],
            EncoderParams::Vanilla(c) => vec![&c.w_in, &c.u_rec, &c.bias],
            EncoderParams::FeedForward(layers) => layers
                .iter()
                .flat_map(|l| [&l.weight, &l.bias])
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            EncoderParams::Gru(c) => vec![
                &mut c.w_update, &mut c.u_update, &mut c.b_update, &mut c.w_reset, &mut c.u_reset,
                &mut c.b_reset, &mut c.w_cand, &mut c.u_cand, &mut c.b_cand,
            ],
            EncoderParams::Vanilla(c) => vec![&mut c.w_in, &mut c.u_rec, &mut c.bias],
            EncoderParams::FeedForward(layers) => layers
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// Register every parameter tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> EncoderNodes {
        EncoderNodes {
            nodes: self.params().iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    /// Accumulate tape gradients into this encoder's parameters.
    pub fn accumulate(&mut self, nodes: &EncoderNodes, grads: &Gradients) {
        for (p, &n) in self.params_mut().into_iter().zip(&nodes.nodes) {
            p.accumulate(n, grads);
        }
    }

    /// One recurrent step `(x_t, h_prev) -> h_t`. Panics for feed-forward encoders.
    pub fn step(&self, tape: &mut Tape, nodes: &EncoderNodes, x: NodeId, h_prev: NodeId) -> NodeId {
        match self {
            EncoderParams::Gru(_) => {
                let [wz, uz, bz, wr, ur, br, wc, uc, bc] = match nodes.nodes[..] {
                    [a, b, c, d, e, f, g, h, i] => [a, b, c, d, e, f, g, h, i],
                    _ => unreachable!("gru binding has 9 tensors"),
                };
                let zx = tape.matvec(wz, x);
                let zh = tape.matvec(uz, h_prev);
                let zs = tape.add(zx, zh);
                let zp = tape.add(zs, bz);
                let z = tape.sigmoid(zp);

                let rx = tape.matvec(wr, x);
                let rh = tape.matvec(ur, h_prev);
                let rs = tape.add(rx, rh);
                let rp = tape.add(rs, br);
                let r = tape.sigmoid(rp);

                let gated = tape.mul(r, h_prev);
                let cx = tape.matvec(wc, x);
                let ch = tape.matvec(uc, gated);
                let cs = tape.add(cx, ch);
                let cp = tape.add(cs, bc);
                let cand = tape.tanh(cp);

                // h = (1 - z) * h_prev + z * cand
                let zh_prev = tape.mul(z, h_prev);
                let keep = tape.sub(h_prev, zh_prev);
                let take = tape.mul(z, cand);
                tape.add(keep, take)
            }
            EncoderParams::Vanilla(_) => {
                let [w, u, b] = match nodes.nodes[..] {
                    [a, c, d] => [a, c, d],
                    _ => unreachable!("vanilla binding has 3 tensors"),
                };
                let wx = tape.matvec(w, x);
                let uh = tape.matvec(u, h_prev);
                let s = tape.add(wx, uh);
                let p = tape.add(s, b);
                tape.tanh(p)
            }
            EncoderParams::FeedForward(_) => panic!("step called on a feed-forward encoder"),
        }
    }

    /// Feed-forward encoding `x -> features`. Panics for recurrent encoders.
    pub fn encode(&self, tape: &mut Tape, nodes: &EncoderNodes, x: NodeId) -> NodeId {
        match self {
            EncoderParams::FeedForward(layers) => {
                let mut cur = x;
                for (i, _) in layers.iter().enumerate() {
                    let w = nodes.nodes[2 * i];
                    let b = nodes.nodes[2 * i + 1];
                    let lin = tape.matvec(w, cur);
                    let pre = tape.add(lin, b);
                    cur = tape.tanh(pre);
                }
                cur
            }
            _ => panic!("encode called on a recurrent encoder"),
        }
    }
}
