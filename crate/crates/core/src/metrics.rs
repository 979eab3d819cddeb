//! Evaluation and analysis metrics.
//!
//! Accuracy is per-token for sequence tasks (next-token targets) and
//! per-instance for classification. The heterogeneity estimate follows the
//! model-probability form: `sum over (x,y) of p_l * log(p_l / p_g)` where
//! `p_*` is the probability each route assigns to the true label. It is not a
//! normalized KL and can go negative; negative sums are clamped to zero and
//! flagged rather than silently reported.

use crate::autodiff::Tape;
use crate::client::{client_pre_inference, TrainHyper};
use crate::dataset::{ClientDataset, ClientId, Instance};
use crate::error::{Error, Result};
use crate::model::{DynamicPersonalizedModel, GlobalModel, Route, RouteMode, RouteOverride};
use crate::tensor::{argmax, softmax_temperature, Tensor};
use serde::{Deserialize, Serialize};

/// Probability floor/ceiling for the heterogeneity estimate.
const PROB_CLAMP: (f64, f64) = (1e-12, 1.0);

/// A model under evaluation: either a personalized composite with a route
/// override, or a bare global model.
pub enum EvalModel<'a> {
    Personalized {
        model: &'a DynamicPersonalizedModel,
        over: RouteOverride,
    },
    Global(&'a GlobalModel),
}

/// Per-prediction-point outcome of one instance under one model.
struct InstanceScan {
    /// Correctness per supervised point.
    correct: Vec<bool>,
    /// Probability assigned to the true label per supervised point.
    label_probs: Vec<f64>,
    /// Local-route probability per decision point (pre-threshold), with the
    /// route that hard thresholding takes.
    decisions: Vec<(f64, Route)>,
}

fn scan_personalized(
    model: &DynamicPersonalizedModel,
    instance: &Instance,
    over: RouteOverride,
) -> Result<InstanceScan> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    match instance {
        Instance::Sequence(tokens) => {
            if tokens.len() < 2 {
                // one decision point, no supervised target
                let fwd = model.forward_sequence(&mut tape, &binding, tokens, over)?;
                let decisions = fwd
                    .route_probs
                    .iter()
                    .map(|p| (p[1], threshold(p[0])))
                    .collect();
                return Ok(InstanceScan {
                    correct: vec![],
                    label_probs: vec![],
                    decisions,
                });
            }
            let inputs = &tokens[..tokens.len() - 1];
            let fwd = model.forward_sequence(&mut tape, &binding, inputs, over)?;
            let mut correct = Vec::with_capacity(inputs.len());
            let mut label_probs = Vec::with_capacity(inputs.len());
            for (j, &logits) in fwd.step_logits.iter().enumerate() {
                let target = tokens[j + 1] as usize;
                let data = tape.value(logits).data();
                correct.push(argmax(data) == target);
                label_probs.push(softmax_temperature(data, 1.0)[target]);
            }
            let decisions = fwd
                .route_probs
                .iter()
                .map(|p| (p[1], threshold(p[0])))
                .collect();
            Ok(InstanceScan {
                correct,
                label_probs,
                decisions,
            })
        }
        Instance::Classify { features, label } => {
            let x = Tensor::vector(features.clone())?;
            let fwd = model.forward_classify(&mut tape, &binding, &x, over);
            let data = tape.value(fwd.logits).data();
            Ok(InstanceScan {
                correct: vec![argmax(data) == *label],
                label_probs: vec![softmax_temperature(data, 1.0)[*label]],
                decisions: vec![(fwd.route_probs[1], threshold(fwd.route_probs[0]))],
            })
        }
    }
}

fn threshold(r_global: f64) -> Route {
    if r_global > 0.5 {
        Route::Global
    } else {
        Route::Local
    }
}

fn scan_global(model: &GlobalModel, instance: &Instance) -> Result<InstanceScan> {
    let mut tape = Tape::new();
    let nodes = model.bind(&mut tape);
    match instance {
        Instance::Sequence(tokens) => {
            if tokens.len() < 2 {
                return Ok(InstanceScan {
                    correct: vec![],
                    label_probs: vec![],
                    decisions: vec![],
                });
            }
            let inputs = &tokens[..tokens.len() - 1];
            let logits = model.forward_sequence_plain(&mut tape, &nodes, inputs)?;
            let mut correct = Vec::new();
            let mut label_probs = Vec::new();
            for (j, &l) in logits.iter().enumerate() {
                let target = tokens[j + 1] as usize;
                let data = tape.value(l).data();
                correct.push(argmax(data) == target);
                label_probs.push(softmax_temperature(data, 1.0)[target]);
            }
            Ok(InstanceScan {
                correct,
                label_probs,
                decisions: vec![],
            })
        }
        Instance::Classify { features, label } => {
            let x = Tensor::vector(features.clone())?;
            let l = model.forward_classify_plain(&mut tape, &nodes, &x);
            let data = tape.value(l).data();
            Ok(InstanceScan {
                correct: vec![argmax(data) == *label],
                label_probs: vec![softmax_temperature(data, 1.0)[*label]],
                decisions: vec![],
            })
        }
    }
}

fn scan(m: &EvalModel, instance: &Instance) -> Result<InstanceScan> {
    match m {
        EvalModel::Personalized { model, over } => scan_personalized(model, instance, *over),
        EvalModel::Global(g) => scan_global(g, instance),
    }
}

/// Fraction of supervised prediction points answered correctly.
pub fn accuracy(m: &EvalModel, instances: &[Instance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Metric("accuracy over an empty instance list".into()));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for inst in instances {
        let s = scan(m, inst)?;
        correct += s.correct.iter().filter(|&&c| c).count();
        total += s.correct.len();
    }
    if total == 0 {
        return Err(Error::Metric("no supervised prediction points".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Result of the model-based heterogeneity estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    /// True when the raw sum was negative and clamped to zero.
    pub clamped_negative: bool,
}

fn kl_sum(pairs: impl IntoIterator<Item = (f64, f64)>) -> KlEstimate {
    let mut sum = 0.0;
    for (p_local, p_global) in pairs {
        let pl = p_local.clamp(PROB_CLAMP.0, PROB_CLAMP.1);
        let pg = p_global.clamp(PROB_CLAMP.0, PROB_CLAMP.1);
        sum += pl * (pl / pg).ln();
    }
    if sum < 0.0 {
        KlEstimate {
            value: 0.0,
            clamped_negative: true,
        }
    } else {
        KlEstimate {
            value: sum,
            clamped_negative: false,
        }
    }
}

/// Model-probability divergence estimate between the local route and the
/// global route of a personalized model, summed over every supervised
/// prediction point of `instances`.
pub fn kl_estimate(
    model: &DynamicPersonalizedModel,
    instances: &[Instance],
) -> Result<KlEstimate> {
    let mut pairs = Vec::new();
    for inst in instances {
        let local = scan_personalized(model, inst, RouteOverride::ForceLocal)?;
        let global = scan_personalized(model, inst, RouteOverride::ForceGlobal)?;
        pairs.extend(local.label_probs.into_iter().zip(global.label_probs));
    }
    Ok(kl_sum(pairs))
}

/// Routing behavior over a set of instances: per-timestep statistics of the
/// local-route probability and the local/global instance counts under the
/// majority rule (a sequence instance is locally routed when more than half
/// of its hard decisions are local; a flat instance by its single decision).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub per_step_mean_local: Vec<f64>,
    pub per_step_std_local: Vec<f64>,
    /// Instances contributing to each timestep.
    pub per_step_count: Vec<usize>,
    pub local_instances: usize,
    pub global_instances: usize,
}

impl RoutingStats {
    /// Fraction of instances routed locally.
    pub fn local_fraction(&self) -> f64 {
        let total = self.local_instances + self.global_instances;
        if total == 0 {
            return 0.0;
        }
        self.local_instances as f64 / total as f64
    }
}

/// Routing statistics for a hard-mode personalized model with its learned
/// gate; probabilities are recorded before thresholding.
pub fn routing_stats(
    model: &DynamicPersonalizedModel,
    instances: &[Instance],
) -> Result<RoutingStats> {
    assert_eq!(model.mode, RouteMode::Hard, "routing stats require hard mode");
    let mut sums: Vec<f64> = Vec::new();
    let mut sq_sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut local_instances = 0usize;
    let mut global_instances = 0usize;
    for inst in instances {
        let s = scan_personalized(model, inst, RouteOverride::Learned)?;
        let mut local_votes = 0usize;
        for (t, &(r_local, route)) in s.decisions.iter().enumerate() {
            if t == sums.len() {
                sums.push(0.0);
                sq_sums.push(0.0);
                counts.push(0);
            }
            sums[t] += r_local;
            sq_sums[t] += r_local * r_local;
            counts[t] += 1;
            if route == Route::Local {
                local_votes += 1;
            }
        }
        if 2 * local_votes > s.decisions.len() {
            local_instances += 1;
        } else {
            global_instances += 1;
        }
    }
    let mean: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| s / c as f64)
        .collect();
    let std: Vec<f64> = sq_sums
        .iter()
        .zip(&counts)
        .zip(&mean)
        .map(|((&sq, &c), &m)| (sq / c as f64 - m * m).max(0.0).sqrt())
        .collect();
    Ok(RoutingStats {
        per_step_mean_local: mean,
        per_step_std_local: std,
        per_step_count: counts,
        local_instances,
        global_instances,
    })
}

/// Full per-client evaluation: the personalized model is derived once via
/// pre-inference, then its learned routing, the local-route-only variant and
/// the global-route-only variant are all scored on the client's test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientEval {
    pub client_id: ClientId,
    /// Supervised prediction points in the test split.
    pub points: usize,
    pub correct_routed: usize,
    pub correct_local: usize,
    pub correct_global: usize,
    /// Soft-inference correct count, present when requested.
    pub correct_soft: Option<usize>,
    /// Points the local route got right but learned routing got wrong.
    pub miss_routed_local_correct: usize,
    /// Points the local route got right but the global route got wrong.
    pub miss_global_local_correct: usize,
    pub kl: KlEstimate,
    pub routing: RoutingStats,
    /// Mean global-route probability over all learned decisions.
    pub mean_r_global: f64,
}

impl ClientEval {
    pub fn accuracy_routed(&self) -> f64 {
        self.correct_routed as f64 / self.points as f64
    }
    pub fn accuracy_local(&self) -> f64 {
        self.correct_local as f64 / self.points as f64
    }
    pub fn accuracy_global(&self) -> f64 {
        self.correct_global as f64 / self.points as f64
    }
    pub fn local_fraction(&self) -> f64 {
        self.routing.local_fraction()
    }
}

/// Derive a personalized model for one client (pre-inference with the given
/// seed) and evaluate it on the client's test split.
pub fn evaluate_client(
    client: &ClientDataset,
    global: &GlobalModel,
    hyper: &TrainHyper,
    seed: u64,
    with_soft: bool,
) -> Result<ClientEval> {
    if client.test.is_empty() {
        return Err(Error::Metric(format!(
            "client {} has no test split",
            client.client_id
        )));
    }
    let model = client_pre_inference(client, global, hyper, seed)?;
    let routing = routing_stats(&model, &client.test)?;

    let soft_model = with_soft.then(|| model.clone().with_mode(RouteMode::Soft));

    let mut points = 0usize;
    let mut correct_routed = 0usize;
    let mut correct_local = 0usize;
    let mut correct_global = 0usize;
    let mut correct_soft = with_soft.then_some(0usize);
    let mut miss_routed = 0usize;
    let mut miss_global = 0usize;
    let mut kl_pairs = Vec::new();
    let mut r_global_sum = 0.0;
    let mut r_global_count = 0usize;

    for inst in &client.test {
        let routed = scan_personalized(&model, inst, RouteOverride::Learned)?;
        let local = scan_personalized(&model, inst, RouteOverride::ForceLocal)?;
        let global_scan = scan_personalized(&model, inst, RouteOverride::ForceGlobal)?;
        points += routed.correct.len();
        correct_routed += routed.correct.iter().filter(|&&c| c).count();
        correct_local += local.correct.iter().filter(|&&c| c).count();
        correct_global += global_scan.correct.iter().filter(|&&c| c).count();
        for ((&r, &l), &g) in routed
            .correct
            .iter()
            .zip(&local.correct)
            .zip(&global_scan.correct)
        {
            if l && !r {
                miss_routed += 1;
            }
            if l && !g {
                miss_global += 1;
            }
        }
        kl_pairs.extend(local.label_probs.into_iter().zip(global_scan.label_probs));
        for &(r_local, _) in &routed.decisions {
            r_global_sum += 1.0 - r_local;
            r_global_count += 1;
        }
        if let (Some(soft), Some(count)) = (&soft_model, correct_soft.as_mut()) {
            let s = scan_personalized(soft, inst, RouteOverride::Learned)?;
            *count += s.correct.iter().filter(|&&c| c).count();
        }
    }
    if points == 0 {
        return Err(Error::Metric(format!(
            "client {} test split has no supervised points",
            client.client_id
        )));
    }
    Ok(ClientEval {
        client_id: client.client_id,
        points,
        correct_routed,
        correct_local,
        correct_global,
        correct_soft,
        miss_routed_local_correct: miss_routed,
        miss_global_local_correct: miss_global,
        kl: kl_sum(kl_pairs),
        routing,
        mean_r_global: if r_global_count == 0 {
            0.5
        } else {
            r_global_sum / r_global_count as f64
        },
    })
}

/// Which model plays the "personalized" role in a comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PersonalizedMode {
    Routed,
    GlobalOnly,
    LocalOnly,
}

/// Client- and instance-level comparison of a personalized model against the
/// pure local model. `c_pct`: percent of clients whose personalized accuracy
/// strictly exceeds the local model's. `i_pct`: percent of prediction points
/// the local model gets right but the personalized model gets wrong.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonStats {
    pub c_pct: f64,
    pub i_pct: f64,
}

pub fn comparison_stats(evals: &[ClientEval], mode: PersonalizedMode) -> ComparisonStats {
    assert!(!evals.is_empty(), "comparison over zero clients");
    let mut preferring = 0usize;
    let mut miss_points = 0usize;
    let mut total_points = 0usize;
    for e in evals {
        let (correct, miss) = match mode {
            PersonalizedMode::Routed => (e.correct_routed, e.miss_routed_local_correct),
            PersonalizedMode::GlobalOnly => (e.correct_global, e.miss_global_local_correct),
            PersonalizedMode::LocalOnly => (e.correct_local, 0),
        };
        if correct > e.correct_local {
            preferring += 1;
        }
        miss_points += miss;
        total_points += e.points;
    }
    ComparisonStats {
        c_pct: 100.0 * preferring as f64 / evals.len() as f64,
        i_pct: 100.0 * miss_points as f64 / total_points as f64,
    }
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// series is constant (the correlation is undefined).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite metric values"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // average rank for the tie group [i, j]
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Rank correlation between the per-client heterogeneity estimate and the
/// fraction of instances routed locally. Absent when either series is
/// constant.
pub fn kl_routing_correlation(evals: &[ClientEval]) -> Option<f64> {
    let xs: Vec<f64> = evals.iter().map(|e| e.kl.value).collect();
    let ys: Vec<f64> = evals.iter().map(|e| e.local_fraction()).collect();
    spearman(&xs, &ys)
}

/// Rank correlation between generator ground-truth divergences and the
/// locally-routed fraction. `divergences[i]` must belong to `evals[i]`.
pub fn divergence_routing_correlation(evals: &[ClientEval], divergences: &[f64]) -> Option<f64> {
    assert_eq!(evals.len(), divergences.len());
    let ys: Vec<f64> = evals.iter().map(|e| e.local_fraction()).collect();
    spearman(divergences, &ys)
}
