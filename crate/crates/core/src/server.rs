//! Server round loop: client sampling, dispatch, weighted FedAvg aggregation
//! and training-run bookkeeping.
//!
//! Within a round, clients may run on a worker pool; every client derives its
//! RNG stream from `(seed, round, client_id)` and updates are merged in
//! client-id order, so parallel and sequential execution produce bit-identical
//! aggregates.

use crate::client::{client_train, plain_client_train, ClientUpdate, TrainHyper};
use crate::dataset::{ClientDataset, ClientId};
use crate::error::{Error, Result};
use crate::metrics::{self, ClientEval, EvalModel};
use crate::model::{GlobalModel, RouteOverride};
use crate::rng::{self, tag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Experiment preset: how clients train and how evaluation routes.
///
/// `Flow`, `GlobalOnly` and `LocalOnly` all train with Algorithm-style
/// dynamic routing and differ only in the route their evaluation forces;
/// `FedavgPlain` trains without any personalization and evaluates the bare
/// global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Flow,
    GlobalOnly,
    LocalOnly,
    FedavgPlain,
}

impl Variant {
    /// Route override applied at evaluation; `None` means plain global-model
    /// evaluation without pre-inference.
    pub fn eval_override(self) -> Option<RouteOverride> {
        match self {
            Variant::Flow => Some(RouteOverride::Learned),
            Variant::GlobalOnly => Some(RouteOverride::ForceGlobal),
            Variant::LocalOnly => Some(RouteOverride::ForceLocal),
            Variant::FedavgPlain => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Log and skip a failing client; the round proceeds with the rest.
    #[default]
    DropClient,
    /// Any client failure fails the whole round.
    FailRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: u64,
    pub clients_per_round: usize,
    /// Clients drawn fresh for each evaluation.
    pub eval_clients: usize,
    /// Evaluate every this many rounds (and at the final round); 0 disables
    /// periodic evaluation.
    pub eval_every: u64,
    pub seed: u64,
    pub parallel: bool,
    pub failure_policy: FailurePolicy,
}

impl FederationConfig {
    pub fn validate(&self, population: usize) -> Result<()> {
        if self.clients_per_round == 0 || self.clients_per_round > population {
            return Err(Error::Config(format!(
                "clients_per_round {} must be in 1..={population}",
                self.clients_per_round
            )));
        }
        Ok(())
    }
}

/// Draw `k` distinct ids for one round. Sampling is without replacement
/// within the round and independent across rounds.
pub fn sample_clients(
    population: &[ClientId],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClientId>> {
    if k > population.len() {
        return Err(Error::Config(format!(
            "cannot sample {k} clients from a population of {}",
            population.len()
        )));
    }
    let mut ids = population.to_vec();
    for i in 0..k {
        let j = rng.gen_range(i..ids.len());
        ids.swap(i, j);
    }
    ids.truncate(k);
    Ok(ids)
}

struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn new() -> Self {
        Self { sum: 0.0, comp: 0.0 }
    }

    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Parameter-wise weighted average of client updates with weights
/// `n_c / sum(n)`. Sums are compensated so the result is permutation-stable;
/// a single update is returned bit-identically.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<GlobalModel> {
    let Some(first) = updates.first() else {
        return Err(Error::Round("no client updates to aggregate".into()));
    };
    if updates.len() == 1 {
        return Ok(first.model.clone());
    }
    let tensors: Vec<Vec<&crate::tensor::Tensor>> = updates
        .iter()
        .map(|u| u.model.params().into_iter().map(|p| &p.tensor).collect())
        .collect();
    let first_shapes: Vec<&[usize]> = tensors[0].iter().map(|t| t.shape()).collect();
    for (u, ts) in updates.iter().zip(&tensors) {
        if ts.len() != first_shapes.len()
            || ts.iter().zip(&first_shapes).any(|(t, s)| t.shape() != *s)
        {
            return Err(Error::Protocol(format!(
                "update from client set is shape-incompatible (client n={})",
                u.num_instances
            )));
        }
    }
    let total_n: u64 = updates.iter().map(|u| u.num_instances).sum();
    if total_n == 0 {
        return Err(Error::Round("aggregation weights sum to zero".into()));
    }
    let denom = total_n as f64;

    let mut result = first.model.clone();
    for (idx, param) in result.params_mut().into_iter().enumerate() {
        let out = param.tensor.data_mut();
        for e in 0..out.len() {
            let mut acc = Neumaier::new();
            for (u, ts) in updates.iter().zip(&tensors) {
                acc.add(u.num_instances as f64 * ts[idx].data()[e]);
            }
            out[e] = acc.total() / denom;
        }
    }
    Ok(result)
}

/// Summary of one periodic evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub eval_clients: Vec<ClientId>,
    /// Mean per-client personalized accuracy under the variant's route.
    pub accuracy: f64,
    /// Mean per-client soft-inference accuracy, when requested.
    pub soft_accuracy: Option<f64>,
    /// Mean global-route probability over learned decisions, when available.
    pub mean_r_global: Option<f64>,
}

/// Per-round record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    /// Ids in the order they were sampled.
    pub sampled: Vec<ClientId>,
    /// `(client_id, n)` for every update that entered aggregation, in
    /// client-id order.
    pub aggregated: Vec<(ClientId, u64)>,
    pub dropped: Vec<ClientId>,
    pub eval: Option<EvalSummary>,
    pub wall_ms: u64,
}

fn client_by_id(clients: &[ClientDataset], id: ClientId) -> Result<&ClientDataset> {
    clients
        .iter()
        .find(|c| c.client_id == id)
        .ok_or_else(|| Error::Data(format!("sampled unknown client id {id}")))
}

/// Execute one federated round: sample, dispatch, aggregate. The input model
/// is an immutable snapshot; the new global model is returned.
pub fn run_round(
    model: &GlobalModel,
    clients: &[ClientDataset],
    hyper: &TrainHyper,
    fcfg: &FederationConfig,
    variant: Variant,
    round: u64,
) -> Result<(GlobalModel, RoundReport)> {
    let start = std::time::Instant::now();
    let population: Vec<ClientId> = clients.iter().map(|c| c.client_id).collect();
    fcfg.validate(population.len())?;
    let mut sample_rng = rng::stream(fcfg.seed, &[tag::SAMPLE_ROUND, round]);
    let sampled = sample_clients(&population, fcfg.clients_per_round, &mut sample_rng)?;

    let train_one = |id: ClientId| -> (ClientId, Result<ClientUpdate>) {
        let result = client_by_id(clients, id).and_then(|c| {
            let key = rng::mix(fcfg.seed, &[tag::CLIENT_TRAIN, round, id]);
            match variant {
                Variant::FedavgPlain => plain_client_train(c, model, hyper, key),
                _ => client_train(c, model, hyper, key),
            }
        });
        (id, result)
    };

    let outcomes: Vec<(ClientId, Result<ClientUpdate>)> = if fcfg.parallel {
        sampled.par_iter().map(|&id| train_one(id)).collect()
    } else {
        sampled.iter().map(|&id| train_one(id)).collect()
    };

    let mut updates: Vec<(ClientId, ClientUpdate)> = Vec::with_capacity(outcomes.len());
    let mut dropped = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(u) => updates.push((id, u)),
            Err(e) => match fcfg.failure_policy {
                FailurePolicy::DropClient => {
                    log::warn!("round {round}: dropping client {id}: {e}");
                    dropped.push(id);
                }
                FailurePolicy::FailRound => {
                    return Err(Error::Round(format!("client {id} failed: {e}")));
                }
            },
        }
    }
    if updates.is_empty() {
        return Err(Error::Round(format!("round {round} produced no usable updates")));
    }
    // merge deterministically by client id, not completion order
    updates.sort_by_key(|(id, _)| *id);
    let aggregated: Vec<(ClientId, u64)> = updates
        .iter()
        .map(|(id, u)| (*id, u.num_instances))
        .collect();
    let next = aggregate_fedavg(&updates.into_iter().map(|(_, u)| u).collect::<Vec<_>>())?;
    let report = RoundReport {
        round,
        sampled,
        aggregated,
        dropped,
        eval: None,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok((next, report))
}

/// Draw evaluation clients and run the variant's personalized evaluation.
/// Returns the summary plus the full per-client detail.
pub fn run_eval(
    model: &GlobalModel,
    clients: &[ClientDataset],
    hyper: &TrainHyper,
    fcfg: &FederationConfig,
    variant: Variant,
    soft_inference: bool,
    round: u64,
) -> Result<(EvalSummary, Vec<ClientEval>)> {
    let population: Vec<ClientId> = clients
        .iter()
        .filter(|c| !c.test.is_empty())
        .map(|c| c.client_id)
        .collect();
    if population.is_empty() {
        return Err(Error::Metric("no clients with test data".into()));
    }
    let k = fcfg.eval_clients.min(population.len()).max(1);
    let mut select_rng = rng::stream(fcfg.seed, &[tag::EVAL_SELECT, round]);
    let ids = sample_clients(&population, k, &mut select_rng)?;

    if variant == Variant::FedavgPlain {
        let accs: Vec<Result<f64>> = if fcfg.parallel {
            ids.par_iter()
                .map(|&id| {
                    metrics::accuracy(&EvalModel::Global(model), &client_by_id(clients, id)?.test)
                })
                .collect()
        } else {
            ids.iter()
                .map(|&id| {
                    metrics::accuracy(&EvalModel::Global(model), &client_by_id(clients, id)?.test)
                })
                .collect()
        };
        let accs = accs.into_iter().collect::<Result<Vec<f64>>>()?;
        let accuracy = accs.iter().sum::<f64>() / accs.len() as f64;
        return Ok((
            EvalSummary {
                eval_clients: ids,
                accuracy,
                soft_accuracy: None,
                mean_r_global: None,
            },
            Vec::new(),
        ));
    }

    let eval_one = |id: ClientId| -> Result<ClientEval> {
        let client = client_by_id(clients, id)?;
        let key = rng::mix(fcfg.seed, &[tag::EVAL_PREINFER, round, id]);
        metrics::evaluate_client(client, model, hyper, key, soft_inference)
    };
    let evals: Vec<Result<ClientEval>> = if fcfg.parallel {
        ids.par_iter().map(|&id| eval_one(id)).collect()
    } else {
        ids.iter().map(|&id| eval_one(id)).collect()
    };
    let evals = evals.into_iter().collect::<Result<Vec<ClientEval>>>()?;

    let pick = |e: &ClientEval| -> f64 {
        match variant {
            Variant::Flow => e.accuracy_routed(),
            Variant::GlobalOnly => e.accuracy_global(),
            Variant::LocalOnly => e.accuracy_local(),
            Variant::FedavgPlain => unreachable!(),
        }
    };
    let accuracy = evals.iter().map(pick).sum::<f64>() / evals.len() as f64;
    let soft_accuracy = soft_inference.then(|| {
        evals
            .iter()
            .map(|e| e.correct_soft.unwrap_or(0) as f64 / e.points as f64)
            .sum::<f64>()
            / evals.len() as f64
    });
    let mean_r_global =
        Some(evals.iter().map(|e| e.mean_r_global).sum::<f64>() / evals.len() as f64);
    Ok((
        EvalSummary {
            eval_clients: ids,
            accuracy,
            soft_accuracy,
            mean_r_global,
        },
        evals,
    ))
}

/// A finished training run.
#[derive(Debug)]
pub struct TrainingRun {
    pub model: GlobalModel,
    pub reports: Vec<RoundReport>,
}

/// Execute the full round loop, evaluating at the configured cadence.
pub fn run_training(
    init: GlobalModel,
    clients: &[ClientDataset],
    hyper: &TrainHyper,
    fcfg: &FederationConfig,
    variant: Variant,
    soft_inference: bool,
) -> Result<TrainingRun> {
    hyper.validate()?;
    fcfg.validate(clients.len())?;
    let mut model = init;
    let mut reports = Vec::with_capacity(fcfg.rounds as usize);
    for round in 1..=fcfg.rounds {
        let (next, mut report) = run_round(&model, clients, hyper, fcfg, variant, round)?;
        model = next;
        let eval_due =
            fcfg.eval_every > 0 && (round % fcfg.eval_every == 0 || round == fcfg.rounds);
        if eval_due {
            let (summary, _) =
                run_eval(&model, clients, hyper, fcfg, variant, soft_inference, round)?;
            report.eval = Some(summary);
        }
        reports.push(report);
    }
    Ok(TrainingRun { model, reports })
}
