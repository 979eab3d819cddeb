//! The per-round client procedure.
//!
//! Each participating client: (1) splits its train data into `d_local` and
//! `d_global`, (2) finetunes a copy of the global encoder on `d_local`,
//! (3) trains the routing policy and the global parameters on `d_global` in
//! alternating passes, then returns only the updated global model. All
//! per-round state (local encoder, policy) is dropped afterwards — clients
//! are stateless and the wire payload stays `O(|W_g|)`.

use crate::autodiff::{sgd_step_clipped, Tape};
use crate::dataset::{ClientDataset, Instance, TaskKind};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{
    regularized_loss, DynamicPersonalizedModel, EncoderCalls, GlobalModel, LocalParams, Route,
    RouteMode, RouteOverride, RoutingPolicy,
};
use crate::tensor::{argmax, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Training hyperparameters for one client round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    /// Epochs of local-encoder finetuning (stage 1).
    pub local_epochs: usize,
    /// Epochs of alternating policy/global training (stages 2-3).
    pub global_epochs: usize,
    pub local_lr: f64,
    pub global_lr: f64,
    /// Softmax temperature of the routing gate.
    pub temperature: f64,
    /// Weight of the global-route regularizer in the objective.
    pub gamma: f64,
    pub batch_size: usize,
    /// Optional global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl TrainHyper {
    /// Defaults for sequence tasks.
    pub fn sequence_defaults() -> Self {
        Self {
            local_epochs: 1,
            global_epochs: 1,
            local_lr: 0.3,
            global_lr: 0.3,
            temperature: 0.75,
            gamma: 1e-2,
            batch_size: 8,
            grad_clip: None,
        }
    }

    /// Defaults for classification tasks.
    pub fn classify_defaults() -> Self {
        Self {
            local_epochs: 5,
            global_epochs: 1,
            local_lr: 0.05,
            global_lr: 0.05,
            temperature: 0.75,
            gamma: 0.05,
            batch_size: 8,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_lr <= 0.0 || self.global_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::Config("grad clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// The per-client train split: `d_local` finetunes the local encoder,
/// `d_global` trains the policy and the global model.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub d_local: Vec<Instance>,
    pub d_global: Vec<Instance>,
}

/// Split the train set. Sequences are split vertically: the former
/// `ceil(len/2)` tokens of every sequence go to `d_local`, the remainder to
/// `d_global`, each half kept as its own trainable sequence. Classification
/// instances are partitioned half/half by a seeded shuffle. Degenerate
/// inputs (length-1 sequence, single instance) put the whole item in
/// `d_local` and duplicate it into `d_global` rather than failing.
pub fn split_dataset(train: &[Instance], task: TaskKind, rng: &mut ChaCha8Rng) -> SplitPair {
    match task {
        TaskKind::Sequence => {
            let mut d_local = Vec::with_capacity(train.len());
            let mut d_global = Vec::with_capacity(train.len());
            for inst in train {
                let Instance::Sequence(tokens) = inst else {
                    continue;
                };
                if tokens.len() < 2 {
                    d_local.push(inst.clone());
                    d_global.push(inst.clone());
                    continue;
                }
                let cut = tokens.len().div_ceil(2);
                d_local.push(Instance::Sequence(tokens[..cut].to_vec()));
                d_global.push(Instance::Sequence(tokens[cut..].to_vec()));
            }
            SplitPair { d_local, d_global }
        }
        TaskKind::Classify => {
            if train.len() < 2 {
                return SplitPair {
                    d_local: train.to_vec(),
                    d_global: train.to_vec(),
                };
            }
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(rng);
            let cut = train.len().div_ceil(2);
            let d_local = order[..cut].iter().map(|&i| train[i].clone()).collect();
            let d_global = order[cut..].iter().map(|&i| train[i].clone()).collect();
            SplitPair { d_local, d_global }
        }
    }
}

/// Which parameter group a training pass updates; all other groups are frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UpdateTarget {
    LocalEncoder,
    Policy,
    GlobalAll,
}

/// One full pass of minibatch SGD over `data`, updating only `target`.
/// Returns whether any step was taken.
fn run_pass(
    model: &mut DynamicPersonalizedModel,
    data: &[Instance],
    target: UpdateTarget,
    gamma: f64,
    lr: f64,
    hyper: &TrainHyper,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    assert_eq!(model.mode, RouteMode::Soft, "training requires soft mode");
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut stepped = false;
    for chunk in order.chunks(hyper.batch_size) {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let mut losses = Vec::new();
        let mut r1s = Vec::new();
        for &idx in chunk {
            match &data[idx] {
                Instance::Sequence(tokens) => {
                    if tokens.len() < 2 {
                        continue; // no next-token target
                    }
                    let inputs = &tokens[..tokens.len() - 1];
                    let fwd =
                        model.forward_sequence(&mut tape, &binding, inputs, RouteOverride::Learned)?;
                    for (j, &logits) in fwd.step_logits.iter().enumerate() {
                        losses.push(tape.cross_entropy(logits, tokens[j + 1] as usize));
                        r1s.push(fwd.step_r1[j]);
                    }
                }
                Instance::Classify { features, label } => {
                    let x = Tensor::vector(features.clone())?;
                    let fwd = model.forward_classify(&mut tape, &binding, &x, RouteOverride::Learned);
                    losses.push(tape.cross_entropy(fwd.logits, *label));
                    r1s.push(fwd.r1);
                }
            }
        }
        if losses.is_empty() {
            continue;
        }
        let loss = regularized_loss(&mut tape, &losses, &r1s, gamma);
        let grads = tape.backward(loss);
        match target {
            UpdateTarget::LocalEncoder => {
                model.local.encoder.accumulate(&binding.local, &grads);
                sgd_step_clipped(model.local.encoder.params_mut(), lr, hyper.grad_clip);
            }
            UpdateTarget::Policy => {
                model.policy.accumulate(&binding.policy, &grads);
                sgd_step_clipped(model.policy.params_mut(), lr, hyper.grad_clip);
            }
            UpdateTarget::GlobalAll => {
                if let (Some(emb), Some(nodes)) =
                    (model.global.embedding.as_mut(), binding.global.embedding.as_ref())
                {
                    emb.accumulate(nodes, &grads);
                }
                model.global.encoder.accumulate(&binding.global.encoder, &grads);
                model.global.decoder.accumulate(&binding.global.decoder, &grads);
                sgd_step_clipped(model.global.params_mut(), lr, hyper.grad_clip);
            }
        }
        stepped = true;
    }
    Ok(stepped)
}

/// Stage 1: deep-copy the global encoder and finetune only that copy on
/// `d_local`, forwarding through the blended model with the given (fresh)
/// policy. The global model, decoder and embedding are untouched. With no
/// usable data the copy comes back unfinetuned and flagged.
pub fn derive_local_params(
    global: &GlobalModel,
    policy: &RoutingPolicy,
    d_local: &[Instance],
    hyper: &TrainHyper,
    rng: &mut ChaCha8Rng,
) -> Result<LocalParams> {
    let mut model = DynamicPersonalizedModel::new(
        global.clone(),
        LocalParams::from_global(global),
        policy.clone(),
        RouteMode::Soft,
    );
    if d_local.is_empty() {
        log::warn!("stage 1 got an empty d_local; returning unfinetuned local params");
        return Ok(model.local);
    }
    let before = global.bits_hash();
    let mut finetuned = false;
    for _ in 0..hyper.local_epochs {
        // plain task loss: the regularizer has zero gradient w.r.t. the local
        // encoder, so gamma = 0 here
        finetuned |= run_pass(
            &mut model,
            d_local,
            UpdateTarget::LocalEncoder,
            0.0,
            hyper.local_lr,
            hyper,
            rng,
        )?;
    }
    debug_assert_eq!(model.global.bits_hash(), before, "stage 1 must not touch W_g");
    model.local.finetuned = finetuned;
    Ok(model.local)
}

/// One full pass over `d_global` updating only the routing policy.
pub fn run_policy_pass(
    model: &mut DynamicPersonalizedModel,
    d_global: &[Instance],
    hyper: &TrainHyper,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    run_pass(
        model,
        d_global,
        UpdateTarget::Policy,
        hyper.gamma,
        hyper.global_lr,
        hyper,
        rng,
    )?;
    Ok(())
}

/// One full pass over `d_global` updating only the global model.
pub fn run_global_pass(
    model: &mut DynamicPersonalizedModel,
    d_global: &[Instance],
    hyper: &TrainHyper,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    run_pass(
        model,
        d_global,
        UpdateTarget::GlobalAll,
        hyper.gamma,
        hyper.global_lr,
        hyper,
        rng,
    )?;
    Ok(())
}

/// Stages 2-3: per epoch, one policy pass then (unless dropped) one global
/// pass, both minimizing the regularized objective. The local encoder is
/// frozen throughout.
pub fn train_policy_and_global(
    model: &mut DynamicPersonalizedModel,
    d_global: &[Instance],
    hyper: &TrainHyper,
    update_global: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if d_global.is_empty() {
        log::warn!("stages 2-3 got an empty d_global; model left unchanged");
        return Ok(());
    }
    for _ in 0..hyper.global_epochs {
        run_policy_pass(model, d_global, hyper, rng)?;
        if update_global {
            run_global_pass(model, d_global, hyper, rng)?;
        }
    }
    Ok(())
}

/// The update a client returns to the server: its instance count and the
/// trained global model. Local params and policy never leave the client.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub num_instances: u64,
    pub model: GlobalModel,
}

/// Wire form of a [`ClientUpdate`]: exactly the global model tensors plus the
/// instance count.
#[derive(Debug, Serialize, Deserialize)]
pub struct WireUpdate {
    pub num_instances: u64,
    pub model: Checkpoint,
}

impl ClientUpdate {
    pub fn to_wire(&self) -> WireUpdate {
        WireUpdate {
            num_instances: self.num_instances,
            model: Checkpoint::from_model(&self.model),
        }
    }

    pub fn from_wire(wire: WireUpdate) -> Result<Self> {
        Ok(Self {
            num_instances: wire.num_instances,
            model: wire.model.into_model()?,
        })
    }
}

fn task_of(client: &ClientDataset) -> Result<TaskKind> {
    match client.train.first() {
        Some(Instance::Sequence(_)) => Ok(TaskKind::Sequence),
        Some(Instance::Classify { .. }) => Ok(TaskKind::Classify),
        None => Err(Error::Data(format!(
            "client {} has no training data",
            client.client_id
        ))),
    }
}

fn build_personalized(
    client: &ClientDataset,
    global: &GlobalModel,
    hyper: &TrainHyper,
    update_global: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DynamicPersonalizedModel> {
    hyper.validate()?;
    let task = task_of(client)?;
    let policy = RoutingPolicy::init(global.config.gate_input_dim(), hyper.temperature, rng)?;
    let split = split_dataset(&client.train, task, rng);
    let local = derive_local_params(global, &policy, &split.d_local, hyper, rng)?;
    let mut model =
        DynamicPersonalizedModel::new(global.clone(), local, policy, RouteMode::Soft);
    train_policy_and_global(&mut model, &split.d_global, hyper, update_global, rng)?;
    Ok(model)
}

/// The full per-round client procedure. Pure in `(inputs, seed)`: the same
/// arguments always produce a bit-identical update.
pub fn client_train(
    client: &ClientDataset,
    global: &GlobalModel,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<ClientUpdate> {
    let mut rng = crate::rng::stream(seed, &[]);
    let model = build_personalized(client, global, hyper, true, &mut rng)?;
    Ok(ClientUpdate {
        num_instances: client.train.len() as u64,
        model: model.global,
    })
}

/// The pre-inference procedure: identical to [`client_train`] except the
/// global update pass is dropped, so the global model is left untouched.
/// Returns the personalized model in hard mode, ready for inference.
pub fn client_pre_inference(
    client: &ClientDataset,
    global: &GlobalModel,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<DynamicPersonalizedModel> {
    let mut rng = crate::rng::stream(seed, &[]);
    let before = global.bits_hash();
    let model = build_personalized(client, global, hyper, false, &mut rng)?;
    debug_assert_eq!(model.global.bits_hash(), before, "pre-inference must not touch W_g");
    Ok(model.with_mode(RouteMode::Hard))
}

/// Plain FedAvg client training: no split, no local params, no routing.
/// Runs `global_epochs` of minibatch SGD on the whole train set, updating
/// every global parameter.
pub fn plain_client_train(
    client: &ClientDataset,
    global: &GlobalModel,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<ClientUpdate> {
    hyper.validate()?;
    if client.train.is_empty() {
        return Err(Error::Data(format!(
            "client {} has no training data",
            client.client_id
        )));
    }
    let mut rng = crate::rng::stream(seed, &[]);
    let mut model = global.clone();
    for _ in 0..hyper.global_epochs {
        let mut order: Vec<usize> = (0..client.train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape);
            let mut losses = Vec::new();
            for &idx in chunk {
                match &client.train[idx] {
                    Instance::Sequence(tokens) => {
                        if tokens.len() < 2 {
                            continue;
                        }
                        let logits =
                            model.forward_sequence_plain(&mut tape, &nodes, &tokens[..tokens.len() - 1])?;
                        for (j, &l) in logits.iter().enumerate() {
                            losses.push(tape.cross_entropy(l, tokens[j + 1] as usize));
                        }
                    }
                    Instance::Classify { features, label } => {
                        let x = Tensor::vector(features.clone())?;
                        let l = model.forward_classify_plain(&mut tape, &nodes, &x);
                        losses.push(tape.cross_entropy(l, *label));
                    }
                }
            }
            if losses.is_empty() {
                continue;
            }
            let total = tape.sum(&losses);
            let mean = tape.affine(total, 1.0 / losses.len() as f64, 0.0);
            let grads = tape.backward(mean);
            if let (Some(emb), Some(en)) = (model.embedding.as_mut(), nodes.embedding.as_ref()) {
                emb.accumulate(en, &grads);
            }
            model.encoder.accumulate(&nodes.encoder, &grads);
            model.decoder.accumulate(&nodes.decoder, &grads);
            sgd_step_clipped(model.params_mut(), hyper.global_lr, hyper.grad_clip);
        }
    }
    Ok(ClientUpdate {
        num_instances: client.train.len() as u64,
        model,
    })
}

/// One routing decision observed at inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    /// Gate probability of the global route, pre-threshold.
    pub r_global: f64,
    pub taken: Route,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Predicted next token per position.
    Tokens(Vec<u32>),
    Class(usize),
}

#[derive(Debug, Clone)]
pub struct InferOutput {
    pub prediction: Prediction,
    pub route_trace: Vec<RouteDecision>,
    pub calls: EncoderCalls,
}

/// Run one instance through the personalized model and report the prediction
/// together with the route decisions taken. In soft mode (available behind a
/// config flag) both routes execute and `taken` records what thresholding
/// would have chosen.
pub fn infer(
    model: &DynamicPersonalizedModel,
    instance: &Instance,
    over: RouteOverride,
) -> Result<InferOutput> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    match instance {
        Instance::Sequence(tokens) => {
            let fwd = model.forward_sequence(&mut tape, &binding, tokens, over)?;
            let mut trace = Vec::with_capacity(tokens.len());
            for (i, probs) in fwd.route_probs.iter().enumerate() {
                let taken = match &fwd.hard_routes {
                    Some(routes) => routes[i],
                    None => {
                        if probs[0] > 0.5 {
                            Route::Global
                        } else {
                            Route::Local
                        }
                    }
                };
                trace.push(RouteDecision {
                    r_global: probs[0],
                    taken,
                });
            }
            let preds = fwd
                .step_logits
                .iter()
                .map(|&l| argmax(tape.value(l).data()) as u32)
                .collect();
            Ok(InferOutput {
                prediction: Prediction::Tokens(preds),
                route_trace: trace,
                calls: fwd.calls,
            })
        }
        Instance::Classify { features, .. } => {
            let x = Tensor::vector(features.clone())?;
            let fwd = model.forward_classify(&mut tape, &binding, &x, over);
            let taken = match fwd.hard_route {
                Some(r) => r,
                None => {
                    if fwd.route_probs[0] > 0.5 {
                        Route::Global
                    } else {
                        Route::Local
                    }
                }
            };
            Ok(InferOutput {
                prediction: Prediction::Class(argmax(tape.value(fwd.logits).data())),
                route_trace: vec![RouteDecision {
                    r_global: fwd.route_probs[0],
                    taken,
                }],
                calls: fwd.calls,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchKind, CellKind, ModelConfig};

    fn seq_model(seed: u64) -> GlobalModel {
        let cfg = ModelConfig {
            arch: ArchKind::Recurrent {
                vocab_size: 12,
                embed_dim: 4,
                cell: CellKind::Gru,
            },
            hidden_dim: 6,
            num_classes: 12,
            decoder_hidden: vec![],
        };
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag::MODEL_INIT]);
        GlobalModel::init(cfg, &mut rng).unwrap()
    }

    fn seq_client(id: u64, n: usize, seed: u64) -> ClientDataset {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, &[id]);
        let mut train = Vec::new();
        for _ in 0..n {
            let len = rng.gen_range(4..9);
            train.push(Instance::Sequence(
                (0..len).map(|_| rng.gen_range(0..12u32)).collect(),
            ));
        }
        ClientDataset {
            client_id: id,
            train,
            valid: vec![],
            test: vec![],
        }
    }

    #[test]
    fn split_rule_sequence_cases() {
        let mut rng = crate::rng::stream(1, &[]);
        let train = vec![
            Instance::Sequence(vec![10, 11, 12, 13]),
            Instance::Sequence(vec![20, 21, 22]),
        ];
        let pair = split_dataset(&train, TaskKind::Sequence, &mut rng);
        assert_eq!(pair.d_local[0], Instance::Sequence(vec![10, 11]));
        assert_eq!(pair.d_global[0], Instance::Sequence(vec![12, 13]));
        assert_eq!(pair.d_local[1], Instance::Sequence(vec![20, 21]));
        assert_eq!(pair.d_global[1], Instance::Sequence(vec![22]));

        // degenerate: a length-1 sequence lands in both halves
        let single = vec![Instance::Sequence(vec![5])];
        let pair = split_dataset(&single, TaskKind::Sequence, &mut rng);
        assert_eq!(pair.d_local, single);
        assert_eq!(pair.d_global, single);
    }

    #[test]
    fn split_rule_classify_partitions() {
        let mut rng = crate::rng::stream(2, &[]);
        let train: Vec<Instance> = (0..10)
            .map(|i| Instance::Classify {
                features: vec![i as f64],
                label: 0,
            })
            .collect();
        let pair = split_dataset(&train, TaskKind::Classify, &mut rng);
        assert_eq!(pair.d_local.len(), 5);
        assert_eq!(pair.d_global.len(), 5);
        let mut seen: Vec<i64> = pair
            .d_local
            .iter()
            .chain(&pair.d_global)
            .map(|i| match i {
                Instance::Classify { features, .. } => features[0] as i64,
                _ => unreachable!(),
            })
            .collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<i64>>());
    }

    #[test]
    fn zero_local_epochs_leaves_local_params_identical() {
        let global = seq_model(3);
        let client = seq_client(0, 6, 4);
        let mut rng = crate::rng::stream(5, &[]);
        let policy = RoutingPolicy::init(10, 0.75, &mut rng).unwrap();
        let split = split_dataset(&client.train, TaskKind::Sequence, &mut rng);
        let mut hyper = TrainHyper::sequence_defaults();
        hyper.local_epochs = 0;
        let local = derive_local_params(&global, &policy, &split.d_local, &hyper, &mut rng).unwrap();
        assert_eq!(local.encoder, global.encoder);
        assert!(!local.finetuned);
    }

    #[test]
    fn stage_one_never_touches_the_global_model() {
        let global = seq_model(6);
        let client = seq_client(1, 6, 7);
        let mut rng = crate::rng::stream(8, &[]);
        let policy = RoutingPolicy::init(10, 0.75, &mut rng).unwrap();
        let split = split_dataset(&client.train, TaskKind::Sequence, &mut rng);
        let hyper = TrainHyper::sequence_defaults();
        let before = global.bits_hash();
        let local = derive_local_params(&global, &policy, &split.d_local, &hyper, &mut rng).unwrap();
        assert_eq!(global.bits_hash(), before);
        assert!(local.finetuned);
        assert_ne!(local.encoder, global.encoder);
    }

    #[test]
    fn policy_pass_freezes_global_and_global_pass_freezes_policy() {
        let global = seq_model(9);
        let client = seq_client(2, 6, 10);
        let mut rng = crate::rng::stream(11, &[]);
        let policy = RoutingPolicy::init(10, 0.75, &mut rng).unwrap();
        let split = split_dataset(&client.train, TaskKind::Sequence, &mut rng);
        let hyper = TrainHyper::sequence_defaults();
        let local = derive_local_params(&global, &policy, &split.d_local, &hyper, &mut rng).unwrap();
        let mut model =
            DynamicPersonalizedModel::new(global.clone(), local, policy, RouteMode::Soft);

        let global_before = model.global.bits_hash();
        let policy_before = model.policy.clone();
        run_policy_pass(&mut model, &split.d_global, &hyper, &mut rng).unwrap();
        assert_eq!(model.global.bits_hash(), global_before, "policy pass froze W_g");
        assert_ne!(model.policy, policy_before, "policy pass trained the gate");

        let policy_mid = model.policy.clone();
        let local_before = model.local.clone();
        run_global_pass(&mut model, &split.d_global, &hyper, &mut rng).unwrap();
        assert_eq!(model.policy, policy_mid, "global pass froze the gate");
        assert_eq!(model.local, local_before, "global pass froze local params");
        assert_ne!(model.global.bits_hash(), global_before, "global pass trained W_g");
    }

    #[test]
    fn client_train_is_deterministic_and_counts_instances() {
        let global = seq_model(12);
        let client = seq_client(3, 7, 13);
        let hyper = TrainHyper::sequence_defaults();
        let a = client_train(&client, &global, &hyper, 99).unwrap();
        let b = client_train(&client, &global, &hyper, 99).unwrap();
        assert_eq!(a.num_instances, 7);
        assert_eq!(a.model.bits_hash(), b.model.bits_hash());

        // different seed, different update
        let c = client_train(&client, &global, &hyper, 100).unwrap();
        assert_ne!(a.model.bits_hash(), c.model.bits_hash());
    }

    #[test]
    fn wire_payload_holds_exactly_the_global_tensors() {
        let global = seq_model(14);
        let client = seq_client(4, 5, 15);
        let hyper = TrainHyper::sequence_defaults();
        let update = client_train(&client, &global, &hyper, 7).unwrap();
        let wire = update.to_wire();
        assert_eq!(wire.model.tensor_count(), global.tensor_count());
        let back = ClientUpdate::from_wire(wire).unwrap();
        assert_eq!(back.model.bits_hash(), update.model.bits_hash());
    }

    #[test]
    fn pre_inference_leaves_global_untouched_and_returns_hard_mode() {
        let global = seq_model(16);
        let client = seq_client(5, 6, 17);
        let hyper = TrainHyper::sequence_defaults();
        let before = global.bits_hash();
        let model = client_pre_inference(&client, &global, &hyper, 21).unwrap();
        assert_eq!(global.bits_hash(), before);
        assert_eq!(model.global.bits_hash(), before);
        assert_eq!(model.mode, RouteMode::Hard);

        // determinism: same seed gives identical routing decisions on a probe
        let again = client_pre_inference(&client, &global, &hyper, 21).unwrap();
        let probe = Instance::Sequence(vec![1, 5, 9, 2]);
        let t1 = infer(&model, &probe, RouteOverride::Learned).unwrap();
        let t2 = infer(&again, &probe, RouteOverride::Learned).unwrap();
        assert_eq!(t1.route_trace.len(), 4);
        for (a, b) in t1.route_trace.iter().zip(&t2.route_trace) {
            assert_eq!(a.taken, b.taken);
            assert_eq!(a.r_global, b.r_global);
        }
    }

    #[test]
    fn identical_encoders_make_prediction_route_independent() {
        let global = seq_model(18);
        let client = seq_client(6, 5, 19);
        let mut hyper = TrainHyper::sequence_defaults();
        hyper.local_epochs = 0; // local stays a bit-copy of global
        hyper.global_epochs = 0;
        let model = client_pre_inference(&client, &global, &hyper, 22).unwrap();
        let probe = Instance::Sequence(vec![3, 1, 4, 1, 5]);
        let a = infer(&model, &probe, RouteOverride::ForceGlobal).unwrap();
        let b = infer(&model, &probe, RouteOverride::ForceLocal).unwrap();
        assert_eq!(a.prediction, b.prediction);
    }

    #[test]
    fn single_instance_epoch_matches_manual_sgd_step() {
        // stage 1 with one instance and batch >= 1 equals one hand-rolled step
        let global = seq_model(23);
        let tokens = vec![2u32, 7, 4];
        let d_local = vec![Instance::Sequence(tokens.clone())];
        let mut rng = crate::rng::stream(24, &[]);
        let policy = RoutingPolicy::init(10, 0.75, &mut rng).unwrap();
        let mut hyper = TrainHyper::sequence_defaults();
        hyper.local_epochs = 1;

        let mut stage_rng = crate::rng::stream(30, &[]);
        let local =
            derive_local_params(&global, &policy, &d_local, &hyper, &mut stage_rng).unwrap();

        // manual: forward the blended model, mean CE over the two targets,
        // backward, one SGD step on the local encoder only
        let mut model = DynamicPersonalizedModel::new(
            global.clone(),
            LocalParams::from_global(&global),
            policy.clone(),
            RouteMode::Soft,
        );
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let fwd = model
            .forward_sequence(&mut tape, &binding, &tokens[..2], RouteOverride::Learned)
            .unwrap();
        let l0 = tape.cross_entropy(fwd.step_logits[0], tokens[1] as usize);
        let l1 = tape.cross_entropy(fwd.step_logits[1], tokens[2] as usize);
        let total = tape.sum(&[l0, l1]);
        let mean = tape.affine(total, 0.5, 0.0);
        let grads = tape.backward(mean);
        model.local.encoder.accumulate(&binding.local, &grads);
        crate::autodiff::sgd_step(model.local.encoder.params_mut(), hyper.local_lr);

        for (a, b) in local
            .encoder
            .params()
            .iter()
            .zip(model.local.encoder.params())
        {
            assert_eq!(a.tensor.data(), b.tensor.data(), "param {}", a.name);
        }
    }
}
