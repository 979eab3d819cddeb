//! The dynamic personalized model: global route, local route, gating policy.
//!
//! Soft mode evaluates both encoders and blends their outputs by the route
//! probabilities (training). Hard mode thresholds the gate and executes
//! exactly one encoder per decision point (inference). Encoder invocations
//! are counted so the one-vs-two execution contract is observable.

use crate::autodiff::{NodeId, Parameter, Tape};
use crate::error::{Error, Result};
use crate::model::{
    DecoderNodes, DecoderParams, EmbeddingNodes, EmbeddingParams, EncoderNodes, EncoderParams,
    ModelConfig, PolicyNodes, RoutingPolicy,
};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// The server-held parameter set; the only state that crosses the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub embedding: Option<EmbeddingParams>,
}

/// Tape bindings for a registered global model.
pub struct GlobalNodes {
    pub encoder: EncoderNodes,
    pub decoder: DecoderNodes,
    pub embedding: Option<EmbeddingNodes>,
}

impl GlobalModel {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let embedding = match &config.arch {
            crate::model::ArchKind::Recurrent {
                vocab_size,
                embed_dim,
                ..
            } => Some(EmbeddingParams::init(*vocab_size, *embed_dim, rng)),
            crate::model::ArchKind::FeedForward { .. } => None,
        };
        let encoder = EncoderParams::init("enc", &config, rng);
        let decoder = DecoderParams::init(
            config.hidden_dim,
            &config.decoder_hidden,
            config.num_classes,
            rng,
        );
        Ok(Self {
            config,
            encoder,
            decoder,
            embedding,
        })
    }

    /// All parameters in a stable order: embedding, encoder, decoder.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(&e.table);
        }
        out.extend(self.encoder.params());
        out.extend(self.decoder.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(&mut e.table);
        }
        out.extend(self.encoder.params_mut());
        out.extend(self.decoder.params_mut());
        out
    }

    /// Number of distinct tensors (the wire payload unit).
    pub fn tensor_count(&self) -> usize {
        self.params().len()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// Fingerprint of exact parameter bits; frozen-stage contracts compare it.
    pub fn bits_hash(&self) -> u64 {
        let mut h = 0x243F_6A88_85A3_08D3;
        for p in self.params() {
            p.tensor.bits_hash(&mut h);
        }
        h
    }

    pub fn bind(&self, tape: &mut Tape) -> GlobalNodes {
        GlobalNodes {
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
            embedding: self.embedding.as_ref().map(|e| e.bind(tape)),
        }
    }

    /// Plain forward without any routing: one logits node per input token.
    pub fn forward_sequence_plain(
        &self,
        tape: &mut Tape,
        nodes: &GlobalNodes,
        tokens: &[u32],
    ) -> Result<Vec<NodeId>> {
        let emb = self
            .embedding
            .as_ref()
            .zip(nodes.embedding.as_ref())
            .ok_or_else(|| Error::Config("sequence forward on a model without embedding".into()))?;
        let mut h = tape.leaf(&Tensor::zeros(vec![self.config.hidden_dim]));
        let mut logits = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let x = emb.0.lookup(tape, emb.1, tok)?;
            h = self.encoder.step(tape, &nodes.encoder, x, h);
            logits.push(self.decoder.decode(tape, &nodes.decoder, h));
        }
        Ok(logits)
    }

    pub fn forward_classify_plain(
        &self,
        tape: &mut Tape,
        nodes: &GlobalNodes,
        features: &Tensor,
    ) -> NodeId {
        let x = tape.leaf(features);
        let f = self.encoder.encode(tape, &nodes.encoder, x);
        self.decoder.decode(tape, &nodes.decoder, f)
    }
}

/// Per-round finetuned encoder copy. Created fresh from the global encoder at
/// round start and discarded afterwards; holding one across rounds is never
/// necessary because it can be recomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalParams {
    pub encoder: EncoderParams,
    /// False when stage 1 had no data to finetune on.
    pub finetuned: bool,
}

impl LocalParams {
    /// Deep copy of the global encoder, not yet finetuned.
    pub fn from_global(global: &GlobalModel) -> Self {
        Self {
            encoder: global.encoder.clone(),
            finetuned: false,
        }
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
    }
}

/// Execution mode of the composite model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    /// Blend both routes by the gate probabilities.
    Soft,
    /// Threshold the gate and run exactly one route.
    Hard,
}

/// Replaces the learned gate with a constant route. Used by the
/// global-route-only / local-route-only evaluation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteOverride {
    Learned,
    ForceGlobal,
    ForceLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Global,
    Local,
}

/// Count of encoder invocations during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncoderCalls {
    pub global: u64,
    pub local: u64,
}

impl EncoderCalls {
    pub fn total(&self) -> u64 {
        self.global + self.local
    }
}

/// Composite of global parameters, local parameters and routing policy.
#[derive(Debug, Clone)]
pub struct DynamicPersonalizedModel {
    pub global: GlobalModel,
    pub local: LocalParams,
    pub policy: RoutingPolicy,
    pub mode: RouteMode,
}

/// Tape bindings for the full composite.
pub struct ModelBinding {
    pub global: GlobalNodes,
    pub local: EncoderNodes,
    pub policy: PolicyNodes,
}

/// Outcome of one routed decision point.
struct RoutedStep {
    output: NodeId,
    /// Probability of the global route, as a scalar node.
    r1: NodeId,
    /// `[r1, r2]` values before any thresholding.
    probs: [f64; 2],
    /// Route executed; only one encoder ran when `Some`.
    taken: Option<Route>,
}

/// Forward pass over a token sequence.
#[derive(Debug)]
pub struct SequenceForward {
    /// One logits node per input position (next-token predictions).
    pub step_logits: Vec<NodeId>,
    /// Global-route probability node per position.
    pub step_r1: Vec<NodeId>,
    /// Gate probabilities per position, pre-threshold.
    pub route_probs: Vec<[f64; 2]>,
    /// Routes executed (hard mode only).
    pub hard_routes: Option<Vec<Route>>,
    pub calls: EncoderCalls,
}

/// Forward pass over one flat instance.
#[derive(Debug)]
pub struct ClassifyForward {
    pub logits: NodeId,
    pub r1: NodeId,
    pub route_probs: [f64; 2],
    pub hard_route: Option<Route>,
    pub calls: EncoderCalls,
}

impl DynamicPersonalizedModel {
    pub fn new(
        global: GlobalModel,
        local: LocalParams,
        policy: RoutingPolicy,
        mode: RouteMode,
    ) -> Self {
        debug_assert_eq!(policy.gate_input_dim(), global.config.gate_input_dim());
        Self {
            global,
            local,
            policy,
            mode,
        }
    }

    pub fn with_mode(mut self, mode: RouteMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        ModelBinding {
            global: self.global.bind(tape),
            local: self.local.encoder.bind(tape),
            policy: self.policy.bind(tape),
        }
    }

    /// Parameter counts per component: full global model, local encoder copy,
    /// routing policy (`2 * gate_dim + 2`).
    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            global: self.global.param_count(),
            local: self.local.param_count(),
            policy: self.policy.param_count(),
        }
    }

    /// Gate output for a recurrent decision point: `softmax_tau(W [x; h] + b)`.
    pub fn route_probs_recurrent(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        x: NodeId,
        h_prev: NodeId,
    ) -> NodeId {
        let joint = tape.concat(x, h_prev);
        self.policy.route_probs(tape, &binding.policy, joint)
    }

    /// Gate output for a flat instance: `softmax_tau(W x + b)`.
    pub fn route_probs_feedforward(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        x: NodeId,
    ) -> NodeId {
        self.policy.route_probs(tape, &binding.policy, x)
    }

    fn gate(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        x: NodeId,
        h_prev: Option<NodeId>,
        over: RouteOverride,
    ) -> (NodeId, NodeId, [f64; 2]) {
        match over {
            RouteOverride::Learned => {
                let r = match h_prev {
                    Some(h) => self.route_probs_recurrent(tape, binding, x, h),
                    None => self.route_probs_feedforward(tape, binding, x),
                };
                let r1 = tape.pick(r, 0);
                let probs = [tape.value(r).data()[0], tape.value(r).data()[1]];
                (r, r1, probs)
            }
            RouteOverride::ForceGlobal => {
                let r = tape.leaf(&Tensor::vector(vec![1.0, 0.0]).expect("const"));
                let r1 = tape.pick(r, 0);
                (r, r1, [1.0, 0.0])
            }
            RouteOverride::ForceLocal => {
                let r = tape.leaf(&Tensor::vector(vec![0.0, 1.0]).expect("const"));
                let r1 = tape.pick(r, 0);
                (r, r1, [0.0, 1.0])
            }
        }
    }

    fn routed_step(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        x: NodeId,
        h_prev: Option<NodeId>,
        over: RouteOverride,
        calls: &mut EncoderCalls,
    ) -> RoutedStep {
        let (r, r1, probs) = self.gate(tape, binding, x, h_prev, over);
        match self.mode {
            RouteMode::Soft => {
                let out_g = self.run_encoder(tape, binding, Route::Global, x, h_prev, calls);
                let out_l = self.run_encoder(tape, binding, Route::Local, x, h_prev, calls);
                let r2 = tape.pick(r, 1);
                let wg = tape.scale_by(r1, out_g);
                let wl = tape.scale_by(r2, out_l);
                let blended = tape.add(wg, wl);
                RoutedStep {
                    output: blended,
                    r1,
                    probs,
                    taken: None,
                }
            }
            RouteMode::Hard => {
                // r1 > 0.5 takes the global route; ties go local.
                let route = if probs[0] > 0.5 { Route::Global } else { Route::Local };
                let out = self.run_encoder(tape, binding, route, x, h_prev, calls);
                RoutedStep {
                    output: out,
                    r1,
                    probs,
                    taken: Some(route),
                }
            }
        }
    }

    fn run_encoder(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        route: Route,
        x: NodeId,
        h_prev: Option<NodeId>,
        calls: &mut EncoderCalls,
    ) -> NodeId {
        let (encoder, nodes) = match route {
            Route::Global => {
                calls.global += 1;
                (&self.global.encoder, &binding.global.encoder)
            }
            Route::Local => {
                calls.local += 1;
                (&self.local.encoder, &binding.local)
            }
        };
        match h_prev {
            Some(h) => encoder.step(tape, nodes, x, h),
            None => encoder.encode(tape, nodes, x),
        }
    }

    /// One blended recurrent step; requires soft mode. Both routes run and
    /// their hidden states are mixed by the gate probabilities.
    pub fn blended_step(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        h_prev: NodeId,
        x: NodeId,
        calls: &mut EncoderCalls,
    ) -> (NodeId, NodeId) {
        assert_eq!(self.mode, RouteMode::Soft, "blended_step requires soft mode");
        let joint = tape.concat(x, h_prev);
        let r = self.policy.route_probs(tape, &binding.policy, joint);
        let step = self.blend_with(tape, binding, r, x, Some(h_prev), calls);
        (step, r)
    }

    /// Feed-forward analogue of [`Self::blended_step`].
    pub fn blended_encode(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        x: NodeId,
        calls: &mut EncoderCalls,
    ) -> (NodeId, NodeId) {
        assert_eq!(self.mode, RouteMode::Soft, "blended_encode requires soft mode");
        let r = self.policy.route_probs(tape, &binding.policy, x);
        let step = self.blend_with(tape, binding, r, x, None, calls);
        (step, r)
    }

    fn blend_with(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        r: NodeId,
        x: NodeId,
        h_prev: Option<NodeId>,
        calls: &mut EncoderCalls,
    ) -> NodeId {
        let out_g = self.run_encoder(tape, binding, Route::Global, x, h_prev, calls);
        let out_l = self.run_encoder(tape, binding, Route::Local, x, h_prev, calls);
        let r1 = tape.pick(r, 0);
        let r2 = tape.pick(r, 1);
        let wg = tape.scale_by(r1, out_g);
        let wl = tape.scale_by(r2, out_l);
        tape.add(wg, wl)
    }

    /// One thresholded recurrent step; requires hard mode. Exactly one
    /// encoder runs.
    pub fn hard_step(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        h_prev: NodeId,
        x: NodeId,
        calls: &mut EncoderCalls,
    ) -> (NodeId, Route) {
        assert_eq!(self.mode, RouteMode::Hard, "hard_step requires hard mode");
        let step = self.routed_step(tape, binding, x, Some(h_prev), RouteOverride::Learned, calls);
        (step.output, step.taken.expect("hard mode always takes a route"))
    }

    /// Feed-forward analogue of [`Self::hard_step`].
    pub fn hard_encode(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        x: NodeId,
        calls: &mut EncoderCalls,
    ) -> (NodeId, Route) {
        assert_eq!(self.mode, RouteMode::Hard, "hard_encode requires hard mode");
        let step = self.routed_step(tape, binding, x, None, RouteOverride::Learned, calls);
        (step.output, step.taken.expect("hard mode always takes a route"))
    }

    /// Unrolled forward over a token sequence. Embeds each token, makes one
    /// routing decision per timestep, and decodes every hidden state through
    /// the shared decoder.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        tokens: &[u32],
        over: RouteOverride,
    ) -> Result<SequenceForward> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        let emb = self
            .global
            .embedding
            .as_ref()
            .zip(binding.global.embedding.as_ref())
            .ok_or_else(|| Error::Config("sequence forward on a model without embedding".into()))?;
        let mut calls = EncoderCalls::default();
        let mut h = tape.leaf(&Tensor::zeros(vec![self.global.config.hidden_dim]));
        let mut out = SequenceForward {
            step_logits: Vec::with_capacity(tokens.len()),
            step_r1: Vec::with_capacity(tokens.len()),
            route_probs: Vec::with_capacity(tokens.len()),
            hard_routes: matches!(self.mode, RouteMode::Hard).then(Vec::new),
            calls: EncoderCalls::default(),
        };
        for &tok in tokens {
            let x = emb.0.lookup(tape, emb.1, tok)?;
            let step = self.routed_step(tape, binding, x, Some(h), over, &mut calls);
            h = step.output;
            out.step_logits
                .push(self.global.decoder.decode(tape, &binding.global.decoder, h));
            out.step_r1.push(step.r1);
            out.route_probs.push(step.probs);
            if let (Some(routes), Some(taken)) = (&mut out.hard_routes, step.taken) {
                routes.push(taken);
            }
        }
        out.calls = calls;
        Ok(out)
    }

    /// Forward over one flat instance: a single routing decision, then the
    /// shared decoder.
    pub fn forward_classify(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        features: &Tensor,
        over: RouteOverride,
    ) -> ClassifyForward {
        let mut calls = EncoderCalls::default();
        let x = tape.leaf(features);
        let step = self.routed_step(tape, binding, x, None, over, &mut calls);
        let logits = self
            .global
            .decoder
            .decode(tape, &binding.global.decoder, step.output);
        ClassifyForward {
            logits,
            r1: step.r1,
            route_probs: step.probs,
            hard_route: step.taken,
            calls,
        }
    }
}

/// Component parameter counts of a dynamic personalized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub global: usize,
    pub local: usize,
    pub policy: usize,
}

/// The training objective: mean over decision points of
/// `loss_i - gamma * log(r1_i)`, with `r1` clamped at [`crate::autodiff::LOG_CLAMP`]
/// before the log. With `gamma == 0` this is exactly the mean task loss.
pub fn regularized_loss(tape: &mut Tape, losses: &[NodeId], r1s: &[NodeId], gamma: f64) -> NodeId {
    assert_eq!(losses.len(), r1s.len(), "losses and route probs must align");
    assert!(!losses.is_empty(), "regularized loss over zero terms");
    assert!(gamma >= 0.0, "gamma must be non-negative");
    let terms: Vec<NodeId> = if gamma == 0.0 {
        losses.to_vec()
    } else {
        losses
            .iter()
            .zip(r1s)
            .map(|(&l, &r1)| {
                let ln = tape.ln_clamped(r1);
                let reg = tape.affine(ln, -gamma, 0.0);
                tape.add(l, reg)
            })
            .collect()
    };
    let total = tape.sum(&terms);
    tape.affine(total, 1.0 / terms.len() as f64, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchKind, CellKind};

    pub(crate) fn seq_config(vocab: usize, m: usize, d: usize) -> ModelConfig {
        ModelConfig {
            arch: ArchKind::Recurrent {
                vocab_size: vocab,
                embed_dim: m,
                cell: CellKind::Gru,
            },
            hidden_dim: d,
            num_classes: vocab,
            decoder_hidden: vec![],
        }
    }

    pub(crate) fn ff_config(n: usize, d: usize, k: usize) -> ModelConfig {
        ModelConfig {
            arch: ArchKind::FeedForward {
                input_dim: n,
                hidden: vec![],
            },
            hidden_dim: d,
            num_classes: k,
            decoder_hidden: vec![],
        }
    }

    fn build(config: ModelConfig, seed: u64, mode: RouteMode) -> DynamicPersonalizedModel {
        let mut rng = crate::rng::stream(seed, &[1]);
        let global = GlobalModel::init(config, &mut rng).unwrap();
        let local = LocalParams::from_global(&global);
        let gate_dim = global.config.gate_input_dim();
        let policy = RoutingPolicy::init(gate_dim, 0.75, &mut rng).unwrap();
        DynamicPersonalizedModel::new(global, local, policy, mode)
    }

    fn perturb_local(model: &mut DynamicPersonalizedModel, delta: f64) {
        for p in model.local.encoder.params_mut() {
            for v in p.tensor.data_mut() {
                *v += delta;
            }
        }
        model.local.finetuned = true;
    }

    #[test]
    fn identical_routes_collapse_to_single_encoder() {
        // local == global: the blend equals the single-encoder output for any gate
        let model = build(seq_config(11, 4, 6), 3, RouteMode::Soft);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let mut calls = EncoderCalls::default();
        let x = binding
            .global
            .embedding
            .as_ref()
            .map(|e| model.global.embedding.as_ref().unwrap().lookup(&mut tape, e, 5))
            .unwrap()
            .unwrap();
        let h0 = tape.leaf(&Tensor::zeros(vec![6]));
        let (h, _r) = model.blended_step(&mut tape, &binding, h0, x, &mut calls);

        let mut tape2 = Tape::new();
        let nodes2 = model.global.bind(&mut tape2);
        let x2 = model
            .global
            .embedding
            .as_ref()
            .unwrap()
            .lookup(&mut tape2, nodes2.embedding.as_ref().unwrap(), 5)
            .unwrap();
        let h02 = tape2.leaf(&Tensor::zeros(vec![6]));
        let direct = model.global.encoder.step(&mut tape2, &nodes2.encoder, x2, h02);

        for (a, b) in tape.value(h).data().iter().zip(tape2.value(direct).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(calls, EncoderCalls { global: 1, local: 1 });
    }

    #[test]
    fn forced_one_hot_blend_equals_global_exactly() {
        let mut model = build(seq_config(11, 4, 6), 4, RouteMode::Soft);
        perturb_local(&mut model, 0.25);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let mut calls = EncoderCalls::default();
        let emb = model.global.embedding.as_ref().unwrap();
        let x = emb
            .lookup(&mut tape, binding.global.embedding.as_ref().unwrap(), 2)
            .unwrap();
        let h0 = tape.leaf(&Tensor::zeros(vec![6]));
        let step = model.routed_step(&mut tape, &binding, x, Some(h0), RouteOverride::ForceGlobal, &mut calls);

        let mut tape2 = Tape::new();
        let nodes2 = model.global.bind(&mut tape2);
        let x2 = emb
            .lookup(&mut tape2, nodes2.embedding.as_ref().unwrap(), 2)
            .unwrap();
        let h02 = tape2.leaf(&Tensor::zeros(vec![6]));
        let direct = model.global.encoder.step(&mut tape2, &nodes2.encoder, x2, h02);
        assert_eq!(tape.value(step.output).data(), tape2.value(direct).data());
    }

    #[test]
    fn hard_threshold_and_tie_rule() {
        let mut model = build(seq_config(11, 4, 6), 5, RouteMode::Hard);
        perturb_local(&mut model, 0.5);

        // bias the gate so r1 is exactly the probability we want
        let cases = [(0.6f64, Route::Global), (0.4, Route::Local), (0.5, Route::Local)];
        for (r1, want) in cases {
            let mut m = model.clone();
            m.policy.temperature = 1.0;
            m.policy.weights.tensor = Tensor::zeros(vec![2, 10]);
            m.policy.bias.tensor =
                Tensor::vector(vec![r1.ln(), (1.0 - r1).ln()]).unwrap();
            let mut tape = Tape::new();
            let binding = m.bind(&mut tape);
            let mut calls = EncoderCalls::default();
            let emb = m.global.embedding.as_ref().unwrap();
            let x = emb
                .lookup(&mut tape, binding.global.embedding.as_ref().unwrap(), 1)
                .unwrap();
            let h0 = tape.leaf(&Tensor::zeros(vec![6]));
            let (h, route) = m.hard_step(&mut tape, &binding, h0, x, &mut calls);
            assert_eq!(route, want, "r1 = {r1}");
            assert_eq!(calls.total(), 1, "hard mode runs exactly one encoder");

            // output is bit-identical to running the chosen encoder alone
            let chosen = match want {
                Route::Global => &m.global.encoder,
                Route::Local => &m.local.encoder,
            };
            let mut tape2 = Tape::new();
            let enc_nodes = chosen.bind(&mut tape2);
            let gnodes = m.global.bind(&mut tape2);
            let x2 = emb
                .lookup(&mut tape2, gnodes.embedding.as_ref().unwrap(), 1)
                .unwrap();
            let h02 = tape2.leaf(&Tensor::zeros(vec![6]));
            let direct = chosen.step(&mut tape2, &enc_nodes, x2, h02);
            assert_eq!(tape.value(h).data(), tape2.value(direct).data());
        }
    }

    #[test]
    #[should_panic(expected = "requires soft mode")]
    fn blended_step_rejects_hard_mode() {
        let model = build(seq_config(11, 4, 6), 6, RouteMode::Hard);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let mut calls = EncoderCalls::default();
        let x = tape.leaf(&Tensor::zeros(vec![4]));
        let h0 = tape.leaf(&Tensor::zeros(vec![6]));
        model.blended_step(&mut tape, &binding, h0, x, &mut calls);
    }

    #[test]
    #[should_panic(expected = "requires hard mode")]
    fn hard_encode_rejects_soft_mode() {
        let model = build(ff_config(5, 4, 3), 7, RouteMode::Soft);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let mut calls = EncoderCalls::default();
        let x = tape.leaf(&Tensor::zeros(vec![5]));
        model.hard_encode(&mut tape, &binding, x, &mut calls);
    }

    #[test]
    fn length_one_sequence_has_one_decision_and_one_logit() {
        let model = build(seq_config(9, 3, 5), 8, RouteMode::Soft);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let fwd = model
            .forward_sequence(&mut tape, &binding, &[4], RouteOverride::Learned)
            .unwrap();
        assert_eq!(fwd.step_logits.len(), 1);
        assert_eq!(fwd.route_probs.len(), 1);
        assert_eq!(fwd.calls.total(), 2); // soft mode runs both encoders once
    }

    #[test]
    fn unknown_token_is_a_vocabulary_error() {
        let model = build(seq_config(9, 3, 5), 8, RouteMode::Soft);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let err = model
            .forward_sequence(&mut tape, &binding, &[4, 9], RouteOverride::Learned)
            .unwrap_err();
        assert!(matches!(err, Error::Vocabulary { token: 9, vocab: 9 }));
    }

    #[test]
    fn identical_encoders_make_soft_and_hard_agree() {
        let soft = build(seq_config(13, 4, 6), 9, RouteMode::Soft);
        let hard = soft.clone().with_mode(RouteMode::Hard);
        let tokens = [1u32, 7, 3, 12, 0];

        let mut tape_s = Tape::new();
        let b_s = soft.bind(&mut tape_s);
        let f_s = soft
            .forward_sequence(&mut tape_s, &b_s, &tokens, RouteOverride::Learned)
            .unwrap();
        let mut tape_h = Tape::new();
        let b_h = hard.bind(&mut tape_h);
        let f_h = hard
            .forward_sequence(&mut tape_h, &b_h, &tokens, RouteOverride::Learned)
            .unwrap();

        for (ls, lh) in f_s.step_logits.iter().zip(&f_h.step_logits) {
            for (a, b) in tape_s.value(*ls).data().iter().zip(tape_h.value(*lh).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(f_s.calls.total(), 2 * f_h.calls.total());
    }

    #[test]
    fn saturated_gate_makes_soft_match_hard() {
        let mut soft = build(seq_config(13, 4, 6), 10, RouteMode::Soft);
        perturb_local(&mut soft, 0.3);
        // enormous bias toward the global route saturates the gate
        soft.policy.weights.tensor = Tensor::zeros(vec![2, 10]);
        soft.policy.bias.tensor = Tensor::vector(vec![40.0, -40.0]).unwrap();
        let hard = soft.clone().with_mode(RouteMode::Hard);
        let tokens = [2u32, 5, 9];

        let mut tape_s = Tape::new();
        let b_s = soft.bind(&mut tape_s);
        let f_s = soft
            .forward_sequence(&mut tape_s, &b_s, &tokens, RouteOverride::Learned)
            .unwrap();
        assert!(f_s.route_probs.iter().all(|p| (p[0] - 1.0).abs() < 1e-9));

        let mut tape_h = Tape::new();
        let b_h = hard.bind(&mut tape_h);
        let f_h = hard
            .forward_sequence(&mut tape_h, &b_h, &tokens, RouteOverride::Learned)
            .unwrap();
        for (ls, lh) in f_s.step_logits.iter().zip(&f_h.step_logits) {
            for (a, b) in tape_s.value(*ls).data().iter().zip(tape_h.value(*lh).data()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn regularized_loss_closed_forms() {
        let mut tape = Tape::new();
        let l1 = tape.leaf_scalar(1.0);
        let r1 = tape.leaf_scalar(0.5);

        // single step, gamma 0.01: 1.0 + 0.01 * ln 2
        let loss = regularized_loss(&mut tape, &[l1], &[r1], 0.01);
        assert!((tape.value(loss).as_scalar() - (1.0 + 0.01 * 2.0f64.ln())).abs() < 1e-12);
        assert!((tape.value(loss).as_scalar() - 1.006931).abs() < 1e-6);

        // gamma 0: exactly the mean of the losses
        let l2 = tape.leaf_scalar(3.0);
        let loss0 = regularized_loss(&mut tape, &[l1, l2], &[r1, r1], 0.0);
        assert_eq!(tape.value(loss0).as_scalar(), 2.0);

        // r1 == 1 contributes no regularization
        let rfull = tape.leaf_scalar(1.0);
        let lossf = regularized_loss(&mut tape, &[l1], &[rfull], 0.7);
        assert_eq!(tape.value(lossf).as_scalar(), 1.0);
    }

    #[test]
    fn param_counts_formulas() {
        // recurrent: m=4, d=6 -> gate dim 10, policy 2*10+2 = 22
        let model = build(seq_config(11, 4, 6), 11, RouteMode::Soft);
        let counts = model.param_counts();
        assert_eq!(counts.policy, 22);
        assert_eq!(counts.local, model.global.encoder.param_count());

        // feed-forward: n=8 -> policy 2*8+2 = 18
        let ff = build(ff_config(8, 4, 3), 12, RouteMode::Soft);
        assert_eq!(ff.param_counts().policy, 18);
        assert_eq!(ff.param_counts().local, ff.global.encoder.param_count());
    }

    #[test]
    fn route_probabilities_normalize_at_every_step() {
        let mut model = build(seq_config(17, 5, 7), 13, RouteMode::Soft);
        perturb_local(&mut model, 0.1);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let fwd = model
            .forward_sequence(&mut tape, &binding, &[3, 1, 16, 8, 12, 4], RouteOverride::Learned)
            .unwrap();
        for p in &fwd.route_probs {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        }
    }
}
