//! Property tests for the numeric invariants: probability normalization,
//! entropy monotonicity, aggregation bounds, split integrity.

use fedroute_core::autodiff::Tape;
use fedroute_core::client::{split_dataset, ClientUpdate};
use fedroute_core::dataset::{Instance, TaskKind};
use fedroute_core::model::{ArchKind, GlobalModel, ModelConfig, RoutingPolicy};
use fedroute_core::server::aggregate_fedavg;
use fedroute_core::tensor::{softmax_temperature, Tensor};
use proptest::prelude::*;

fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_probability_vector(
        logits in prop::collection::vec(-30.0f64..30.0, 1..6),
        log_tau in -3.0f64..3.0,
    ) {
        let tau = 10f64.powf(log_tau);
        let p = softmax_temperature(&logits, tau);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
    }

    #[test]
    fn softmax_entropy_is_nondecreasing_in_temperature(
        logits in prop::collection::vec(-5.0f64..5.0, 2..5),
        log_tau_low in -2.0f64..2.0,
        bump in 0.01f64..2.0,
    ) {
        // fixed non-constant logits
        prop_assume!(logits.iter().any(|&l| (l - logits[0]).abs() > 1e-6));
        let tau_low = 10f64.powf(log_tau_low);
        let tau_high = tau_low * (1.0 + bump);
        let h_low = entropy(&softmax_temperature(&logits, tau_low));
        let h_high = entropy(&softmax_temperature(&logits, tau_high));
        prop_assert!(h_high >= h_low - 1e-12, "entropy fell from {h_low} to {h_high}");
    }

    #[test]
    fn route_probabilities_normalize(
        seed in 0u64..1000,
        input in prop::collection::vec(-3.0f64..3.0, 4),
        log_tau in -2.0f64..2.0,
    ) {
        let mut rng = fedroute_core::rng::stream(seed, &[60]);
        let policy = RoutingPolicy::init(4, 10f64.powf(log_tau), &mut rng).unwrap();
        let mut tape = Tape::new();
        let nodes = policy.bind(&mut tape);
        let x = tape.leaf(&Tensor::vector(input).unwrap());
        let r = policy.route_probs(&mut tape, &nodes, x);
        let v = tape.value(r).data();
        prop_assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        prop_assert!(v[0] >= 0.0 && v[1] >= 0.0);
    }

    #[test]
    fn aggregation_stays_within_client_bounds(
        fills in prop::collection::vec((-5.0f64..5.0, 1u64..20), 2..6),
    ) {
        let cfg = ModelConfig {
            arch: ArchKind::FeedForward { input_dim: 3, hidden: vec![] },
            hidden_dim: 2,
            num_classes: 2,
            decoder_hidden: vec![],
        };
        let mut rng = fedroute_core::rng::stream(1, &[61]);
        let base = GlobalModel::init(cfg, &mut rng).unwrap();
        let updates: Vec<ClientUpdate> = fills.iter().map(|&(fill, n)| {
            let mut m = base.clone();
            for p in m.params_mut() {
                let shape = p.tensor.shape().to_vec();
                let len = p.tensor.len();
                p.tensor = Tensor::new(shape, vec![fill; len]).unwrap();
            }
            ClientUpdate { num_instances: n, model: m }
        }).collect();
        let agg = aggregate_fedavg(&updates).unwrap();
        let lo = fills.iter().map(|&(f, _)| f).fold(f64::INFINITY, f64::min);
        let hi = fills.iter().map(|&(f, _)| f).fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-12 * (lo.abs().max(hi.abs()).max(1.0));
        for p in agg.params() {
            for &v in p.tensor.data() {
                prop_assert!(v >= lo - slack && v <= hi + slack, "{v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn aggregation_is_linear_in_scaled_copies(
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        n in 1u64..50,
    ) {
        // aggregate of aW and bW with equal n equals ((a+b)/2) W elementwise
        let cfg = ModelConfig {
            arch: ArchKind::FeedForward { input_dim: 2, hidden: vec![] },
            hidden_dim: 2,
            num_classes: 2,
            decoder_hidden: vec![],
        };
        let mut rng = fedroute_core::rng::stream(2, &[62]);
        let base = GlobalModel::init(cfg, &mut rng).unwrap();
        let scaled = |s: f64| {
            let mut m = base.clone();
            for p in m.params_mut() {
                for v in p.tensor.data_mut() {
                    *v *= s;
                }
            }
            ClientUpdate { num_instances: n, model: m }
        };
        let agg = aggregate_fedavg(&[scaled(a), scaled(b)]).unwrap();
        for (p, q) in agg.params().iter().zip(base.params()) {
            for (&got, &orig) in p.tensor.data().iter().zip(q.tensor.data()) {
                let want = (a + b) / 2.0 * orig;
                prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sequence_split_reassembles_the_original(
        seqs in prop::collection::vec(prop::collection::vec(0u32..32, 2..12), 1..8),
    ) {
        let train: Vec<Instance> = seqs.iter().cloned().map(Instance::Sequence).collect();
        let mut rng = fedroute_core::rng::stream(3, &[63]);
        let pair = split_dataset(&train, TaskKind::Sequence, &mut rng);
        prop_assert_eq!(pair.d_local.len(), seqs.len());
        prop_assert_eq!(pair.d_global.len(), seqs.len());
        for ((orig, l), g) in seqs.iter().zip(&pair.d_local).zip(&pair.d_global) {
            let (Instance::Sequence(l), Instance::Sequence(g)) = (l, g) else { panic!() };
            // former half has ceil(len/2) tokens and the halves concatenate
            prop_assert_eq!(l.len(), orig.len().div_ceil(2));
            let mut joined = l.clone();
            joined.extend_from_slice(g);
            prop_assert_eq!(&joined, orig);
        }
    }

    #[test]
    fn classify_split_is_a_partition(
        n in 2usize..40,
        seed in 0u64..100,
    ) {
        let train: Vec<Instance> = (0..n)
            .map(|i| Instance::Classify { features: vec![i as f64], label: i % 3 })
            .collect();
        let mut rng = fedroute_core::rng::stream(seed, &[64]);
        let pair = split_dataset(&train, TaskKind::Classify, &mut rng);
        prop_assert_eq!(pair.d_local.len() + pair.d_global.len(), n);
        let mut ids: Vec<i64> = pair.d_local.iter().chain(&pair.d_global).map(|i| match i {
            Instance::Classify { features, .. } => features[0] as i64,
            _ => unreachable!(),
        }).collect();
        ids.sort();
        prop_assert_eq!(ids, (0..n as i64).collect::<Vec<_>>());
        // halves differ in size by at most one
        let diff = pair.d_local.len() as i64 - pair.d_global.len() as i64;
        prop_assert!(diff >= 0 && diff <= 1);
    }
}
