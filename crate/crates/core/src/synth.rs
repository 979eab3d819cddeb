//! Synthetic heterogeneous federations.
//!
//! Sequence tasks sample token sequences from a per-client Markov chain
//! `(1 - lambda) * P_global + lambda * P_client`; `lambda` is the
//! heterogeneity dial. Classification tasks draw labels from per-client
//! Dirichlet proportions and features from class-conditional Gaussians with a
//! per-client mean shift. Generators retain their ground truth, so the exact
//! divergence of every client's generating distribution from the global one
//! is available analytically.

use crate::dataset::{ClientDataset, Federation, Instance, TaskKind};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Dirichlet concentration for Markov transition rows; low values make rows
/// peaky enough for a small recurrent model to learn.
const ROW_CONCENTRATION: f64 = 0.3;
/// Scale of the class-mean layout for classification tasks.
const CLASS_MEAN_SCALE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTaskSpec {
    pub vocab_size: usize,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    pub num_clients: usize,
    /// Inclusive range of instances per client.
    pub instances_per_client: (usize, usize),
    /// Heterogeneity dial in `[0, 1]`.
    pub heterogeneity: f64,
    pub seed: u64,
}

impl SequenceTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.min_seq_len < 2 || self.max_seq_len < self.min_seq_len {
            return Err(Error::Config(
                "sequence lengths must satisfy 2 <= min <= max".into(),
            ));
        }
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be positive".into()));
        }
        let (lo, hi) = self.instances_per_client;
        if lo < 5 || hi < lo {
            return Err(Error::Config(
                "instances_per_client must satisfy 5 <= lo <= hi".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::Config("heterogeneity must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyTaskSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_clients: usize,
    pub instances_per_client: (usize, usize),
    /// Symmetric Dirichlet concentration of per-client label proportions;
    /// small values skew labels.
    pub label_alpha: f64,
    /// Inclusive range of per-client feature mean-shift magnitudes.
    pub feature_shift: (f64, f64),
    /// Standard deviation of the class-conditional Gaussian noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl ClassifyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be positive".into()));
        }
        let (lo, hi) = self.instances_per_client;
        if lo < 5 || hi < lo {
            return Err(Error::Config(
                "instances_per_client must satisfy 5 <= lo <= hi".into(),
            ));
        }
        if self.label_alpha <= 0.0 {
            return Err(Error::Config("label_alpha must be positive".into()));
        }
        let (slo, shi) = self.feature_shift;
        if slo < 0.0 || shi < slo {
            return Err(Error::Config("feature_shift range must satisfy 0 <= lo <= hi".into()));
        }
        if self.noise_std <= 0.0 {
            return Err(Error::Config("noise_std must be positive".into()));
        }
        Ok(())
    }
}

fn dirichlet_row(k: usize, conc: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dist = Dirichlet::new_with_size(conc, k).expect("valid dirichlet");
    let mut row: Vec<f64> = dist.sample(rng);
    // renormalize so each row is exactly stochastic up to one rounding
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= sum);
    row
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
fn stationary(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..500 {
        next.iter_mut().for_each(|v| *v = 0.0);
        for (s, row) in rows.iter().enumerate() {
            let w = pi[s];
            for (t, &p) in row.iter().enumerate() {
                next[t] += w * p;
            }
        }
        let sum: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= sum);
        std::mem::swap(&mut pi, &mut next);
    }
    pi
}

/// Exact per-step KL divergence rate of the `client` chain from the `global`
/// chain, weighted by the client chain's stationary distribution.
pub fn markov_kl_rate(client: &[Vec<f64>], global: &[Vec<f64>]) -> f64 {
    assert_eq!(client.len(), global.len());
    let pi = stationary(client);
    let mut kl = 0.0;
    for (s, (crow, grow)) in client.iter().zip(global).enumerate() {
        let mut row_kl = 0.0;
        for (&c, &g) in crow.iter().zip(grow) {
            if c > 0.0 {
                row_kl += c * (c / g.max(1e-300)).ln();
            }
        }
        kl += pi[s] * row_kl;
    }
    kl
}

fn split_counts(n: usize) -> (usize, usize, usize) {
    let valid = (n / 10).max(1);
    let test = (n / 10).max(1);
    (n - valid - test, valid, test)
}

fn assemble_client(client_id: u64, mut items: Vec<Instance>, rng: &mut ChaCha8Rng) -> ClientDataset {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
    let (tr, va, _te) = split_counts(items.len());
    let test = items.split_off(tr + va);
    let valid = items.split_off(tr);
    ClientDataset {
        client_id,
        train: items,
        valid,
        test,
    }
}

/// Generate a sequence federation with an 8:1:1 per-client split.
pub fn generate_sequence_federation(spec: &SequenceTaskSpec) -> Result<Federation> {
    spec.validate()?;
    let v = spec.vocab_size;
    let mut grng = rng::stream(spec.seed, &[tag::DATA_GLOBAL]);
    let p_global: Vec<Vec<f64>> = (0..v).map(|_| dirichlet_row(v, ROW_CONCENTRATION, &mut grng)).collect();

    let lambda = spec.heterogeneity;
    let mut clients = Vec::with_capacity(spec.num_clients);
    let mut divergences = Vec::with_capacity(spec.num_clients);
    for c in 0..spec.num_clients as u64 {
        let mut crng = rng::stream(spec.seed, &[tag::DATA_CLIENT, c]);
        let p_client: Vec<Vec<f64>> =
            (0..v).map(|_| dirichlet_row(v, ROW_CONCENTRATION, &mut crng)).collect();
        let mixed: Vec<Vec<f64>> = p_global
            .iter()
            .zip(&p_client)
            .map(|(g, p)| {
                g.iter()
                    .zip(p)
                    .map(|(&gx, &px)| (1.0 - lambda) * gx + lambda * px)
                    .collect()
            })
            .collect();
        divergences.push(markov_kl_rate(&mixed, &p_global));

        let (lo, hi) = spec.instances_per_client;
        let n = crng.gen_range(lo..=hi);
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let len = crng.gen_range(spec.min_seq_len..=spec.max_seq_len);
            let mut tokens = Vec::with_capacity(len);
            let mut state = crng.gen_range(0..v);
            tokens.push(state as u32);
            for _ in 1..len {
                state = sample_categorical(&mixed[state], &mut crng);
                tokens.push(state as u32);
            }
            items.push(Instance::Sequence(tokens));
        }
        clients.push(assemble_client(c, items, &mut crng));
    }
    Ok(Federation {
        task: TaskKind::Sequence,
        clients,
        true_divergence: divergences,
    })
}

/// Generate a classification federation with an 8:1:1 per-client split.
///
/// The global reference distribution is the unshifted class-conditional model
/// with the population-average label proportions; each client's divergence
/// from it decomposes into a label-distribution KL plus the Gaussian shift
/// term `||delta||^2 / (2 sigma^2)`.
pub fn generate_classify_federation(spec: &ClassifyTaskSpec) -> Result<Federation> {
    spec.validate()?;
    let k = spec.num_classes;
    let dim = spec.input_dim;
    let mut grng = rng::stream(spec.seed, &[tag::DATA_GLOBAL]);
    let class_means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..dim)
                .map(|_| CLASS_MEAN_SCALE * grng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    // per-client ground truth first, so the population average is available
    let mut label_dists = Vec::with_capacity(spec.num_clients);
    let mut shifts = Vec::with_capacity(spec.num_clients);
    for c in 0..spec.num_clients as u64 {
        let mut crng = rng::stream(spec.seed, &[tag::DATA_CLIENT, c]);
        let dist = dirichlet_row(k, spec.label_alpha, &mut crng);
        let raw: Vec<f64> = (0..dim).map(|_| crng.sample::<f64, _>(StandardNormal)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let (slo, shi) = spec.feature_shift;
        let mag = if shi > slo { crng.gen_range(slo..=shi) } else { slo };
        let delta: Vec<f64> = raw.iter().map(|x| mag * x / norm).collect();
        label_dists.push(dist);
        shifts.push(delta);
    }
    let mut mean_labels = vec![0.0; k];
    for dist in &label_dists {
        for (m, &p) in mean_labels.iter_mut().zip(dist) {
            *m += p / spec.num_clients as f64;
        }
    }

    let mut clients = Vec::with_capacity(spec.num_clients);
    let mut divergences = Vec::with_capacity(spec.num_clients);
    for c in 0..spec.num_clients {
        // a second, disjoint stream for the instance draws
        let mut irng = rng::stream(spec.seed, &[tag::DATA_CLIENT, c as u64, 1]);
        let dist = &label_dists[c];
        let delta = &shifts[c];

        let label_kl: f64 = dist
            .iter()
            .zip(&mean_labels)
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, &q)| p * (p / q.max(1e-300)).ln())
            .sum();
        let shift_kl =
            delta.iter().map(|d| d * d).sum::<f64>() / (2.0 * spec.noise_std * spec.noise_std);
        divergences.push(label_kl + shift_kl);

        let (lo, hi) = spec.instances_per_client;
        let n = irng.gen_range(lo..=hi);
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let y = sample_categorical(dist, &mut irng);
            let features: Vec<f64> = (0..dim)
                .map(|j| {
                    class_means[y][j]
                        + delta[j]
                        + spec.noise_std * irng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            items.push(Instance::Classify { features, label: y });
        }
        clients.push(assemble_client(c as u64, items, &mut irng));
    }
    Ok(Federation {
        task: TaskKind::Classify,
        clients,
        true_divergence: divergences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_spec(lambda: f64, seed: u64) -> SequenceTaskSpec {
        SequenceTaskSpec {
            vocab_size: 8,
            min_seq_len: 4,
            max_seq_len: 10,
            num_clients: 4,
            instances_per_client: (20, 30),
            heterogeneity: lambda,
            seed,
        }
    }

    #[test]
    fn homogeneous_limit_has_zero_divergence() {
        let fed = generate_sequence_federation(&seq_spec(0.0, 11)).unwrap();
        for &d in &fed.true_divergence {
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn token_ids_stay_in_vocabulary_and_splits_partition() {
        let fed = generate_sequence_federation(&seq_spec(0.7, 12)).unwrap();
        for client in &fed.clients {
            let total = client.train.len() + client.valid.len() + client.test.len();
            assert!((20..=30).contains(&total));
            assert!(!client.train.is_empty());
            assert!(!client.valid.is_empty());
            assert!(!client.test.is_empty());
            for inst in client.train.iter().chain(&client.valid).chain(&client.test) {
                let Instance::Sequence(tokens) = inst else { panic!() };
                assert!((4..=10).contains(&tokens.len()));
                assert!(tokens.iter().all(|&t| t < 8));
            }
        }
    }

    #[test]
    fn determinism_same_spec_same_federation() {
        let a = generate_sequence_federation(&seq_spec(0.5, 13)).unwrap();
        let b = generate_sequence_federation(&seq_spec(0.5, 13)).unwrap();
        assert_eq!(a.clients, b.clients);
        assert_eq!(a.true_divergence, b.true_divergence);
    }

    #[test]
    fn lambda_one_bigram_statistics_match_client_chain() {
        // with lambda = 1 the empirical bigram distribution of a client's data
        // converges to its own chain, which differs from the global one
        let mut spec = seq_spec(1.0, 14);
        spec.instances_per_client = (300, 300);
        spec.max_seq_len = 12;
        let fed = generate_sequence_federation(&spec).unwrap();

        // rebuild the client-0 chain exactly as the generator does
        let v = spec.vocab_size;
        let mut crng = rng::stream(spec.seed, &[tag::DATA_CLIENT, 0]);
        let p_client: Vec<Vec<f64>> =
            (0..v).map(|_| dirichlet_row(v, ROW_CONCENTRATION, &mut crng)).collect();

        let client = &fed.clients[0];
        let mut counts = vec![vec![0usize; v]; v];
        for inst in client.train.iter().chain(&client.valid).chain(&client.test) {
            let Instance::Sequence(tokens) = inst else { panic!() };
            for w in tokens.windows(2) {
                counts[w[0] as usize][w[1] as usize] += 1;
            }
        }
        // compare rows with enough observations against the true chain
        for (s, row) in counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            if n < 200 {
                continue;
            }
            for (t, &c) in row.iter().enumerate() {
                let emp = c as f64 / n as f64;
                let truth = p_client[s][t];
                let tol = 4.0 * (truth * (1.0 - truth) / n as f64).sqrt() + 0.02;
                assert!(
                    (emp - truth).abs() < tol,
                    "bigram ({s},{t}): empirical {emp:.3} vs true {truth:.3}"
                );
            }
        }
    }

    #[test]
    fn hand_built_two_state_chain_matches_hand_kl() {
        let client = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let global = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        // stationary of the client chain: pi = (2/3, 1/3)
        let pi0: f64 = 2.0 / 3.0;
        let pi1: f64 = 1.0 / 3.0;
        let row0 = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let row1 = 0.2 * (0.2f64 / 0.5).ln() + 0.8 * (0.8f64 / 0.5).ln();
        let expect = pi0 * row0 + pi1 * row1;
        assert!((markov_kl_rate(&client, &global) - expect).abs() < 1e-12);

        // identical chains: exactly zero
        assert_eq!(markov_kl_rate(&global, &global), 0.0);
    }

    #[test]
    fn mean_divergence_is_monotone_in_lambda() {
        let lambdas = [0.0, 0.25, 0.5, 0.75, 1.0];
        let mut last = -1.0;
        for &l in &lambdas {
            let fed = generate_sequence_federation(&seq_spec(l, 15)).unwrap();
            let mean: f64 =
                fed.true_divergence.iter().sum::<f64>() / fed.true_divergence.len() as f64;
            assert!(
                mean >= last - 1e-12,
                "mean divergence fell from {last} to {mean} at lambda {l}"
            );
            last = mean;
        }
    }

    #[test]
    fn dirichlet_concentration_controls_label_skew() {
        let mut spec = ClassifyTaskSpec {
            input_dim: 4,
            num_classes: 10,
            num_clients: 20,
            instances_per_client: (40, 60),
            label_alpha: 1e6,
            feature_shift: (0.0, 0.0),
            noise_std: 1.0,
            seed: 16,
        };
        // near-infinite alpha: per-client label histograms are near uniform
        let fed = generate_classify_federation(&spec).unwrap();
        for client in &fed.clients {
            let mut hist = vec![0usize; 10];
            let mut total = 0usize;
            for inst in client.train.iter().chain(&client.valid).chain(&client.test) {
                let Instance::Classify { label, .. } = inst else { panic!() };
                hist[*label] += 1;
                total += 1;
            }
            for &h in &hist {
                assert!((h as f64 / total as f64) < 0.35, "skewed at alpha=1e6");
            }
        }

        // strong skew: some client puts most mass on one class
        spec.label_alpha = 0.1;
        spec.seed = 17;
        let fed = generate_classify_federation(&spec).unwrap();
        let mut saw_dominant = false;
        for client in &fed.clients {
            let mut hist = vec![0usize; 10];
            let mut total = 0usize;
            for inst in client.train.iter().chain(&client.valid).chain(&client.test) {
                let Instance::Classify { label, .. } = inst else { panic!() };
                hist[*label] += 1;
                total += 1;
            }
            if hist.iter().any(|&h| h as f64 / total as f64 > 0.6) {
                saw_dominant = true;
            }
        }
        assert!(saw_dominant, "alpha=0.1 should concentrate labels");
    }
}
