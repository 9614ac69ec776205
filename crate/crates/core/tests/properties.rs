use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cluenet::checkpoint::{decode, encode, Entry, Payload};
use cluenet::config::{ModelConfig, PRESETS};
use cluenet::gfc;
use cluenet::icp::Icp;
use cluenet::interpret::{kmeans_trace, receptive_fields};
use cluenet::layers::trunc_normal;
use cluenet::net::Model;
use cluenet::train::data::epoch_order;
use cluenet::{FeatureMap, Tensor};

fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    trunc_normal(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_distributions(m in 1usize..8, n in 1usize..200, d in 1usize..10, tau in 0.01f64..4.0, seed: u64) {
        let (_, s) = gfc::soft_aggregate(&randn(seed, &[m, d]), &randn(seed ^ 1, &[n, d]), &randn(seed ^ 2, &[n, d]), tau).unwrap();
        for row in s.data().chunks_exact(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn streaming_matches_naive(m in 1usize..6, n in 1usize..300, d in 1usize..8, chunk in 1usize..64, seed: u64) {
        let (cs, ps, pv) = (randn(seed, &[m, d]), randn(seed ^ 1, &[n, d]), randn(seed ^ 2, &[n, d]));
        let (naive, _) = gfc::soft_aggregate(&cs, &ps, &pv, 0.05).unwrap();
        let stream = gfc::soft_aggregate_streaming(&cs, &ps, &pv, 0.05, chunk).unwrap();
        prop_assert!(naive.max_abs_diff(&stream) < 1e-12);
    }

    #[test]
    fn assignment_keeps_row_maximum(n in 1usize..30, m in 1usize..10, dh in 1usize..5, alpha in -4.0f64..4.0, beta in -2.0f64..2.0, seed: u64) {
        let (ps, q) = (randn(seed, &[n, dh]), randn(seed ^ 3, &[m, dh]));
        let asg = gfc::compute_assignment(std::slice::from_ref(&ps), std::slice::from_ref(&q), alpha, beta).unwrap();
        let dense = gfc::assignment_scores(&ps, &q, alpha, beta).unwrap();
        for i in 0..n {
            let row = &dense.data()[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(asg.weight(0, i), max);
            prop_assert_eq!(asg.col(0, i), row.iter().position(|&v| v == max).unwrap());
        }
    }

    #[test]
    fn pooling_is_a_partition(h in 1usize..5, w in 1usize..5, seed: u64) {
        let (h, w) = (2 * h, 2 * w);
        let icp = Icp::<f64>::new("p", 4, 6, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = FeatureMap::from_tensor(&randn(seed ^ 5, &[2, h, w, 4]), 1).unwrap();
        let (y, cache) = icp.forward(&x).unwrap();
        prop_assert_eq!((y.height, y.width), (h / 2, w / 2));
        for a in &cache.assignments {
            prop_assert!(a.is_partition());
        }
    }

    #[test]
    fn model_fields_partition_the_image(seed in 0u64..1000) {
        let cfg = ModelConfig::preset("micro-toy").unwrap();
        let model = Model::<f64>::build(&cfg, seed).unwrap();
        let (_, trace) = model.forward(&randn(seed, &[1, 16, 16, 3]), true).unwrap();
        let t = &trace.unwrap()[0];
        for stage in 1..=4 {
            let fields = receptive_fields(t, stage).unwrap();
            let total: usize = fields.iter().map(|f| f.len()).sum();
            let union: std::collections::BTreeSet<_> = fields.iter().flatten().collect();
            prop_assert_eq!(total, 256);
            prop_assert_eq!(union.len(), 256);
        }
    }

    #[test]
    fn kmeans_never_increases_sse(m in 1usize..20, d in 1usize..4, k in 1usize..20, seed: u64) {
        let k = k.min(m);
        let (labels, sse) = kmeans_trace(&randn(seed, &[m, d]), k, 100, seed).unwrap();
        prop_assert_eq!(labels.len(), m);
        prop_assert!(labels.iter().all(|&l| l < k));
        for w in sse.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn container_round_trips(values in proptest::collection::vec(any::<f64>(), 0..40), ints in proptest::collection::vec(any::<u32>(), 0..40), name in "[a-z/._]{1,20}") {
        let entries = vec![
            Entry::new(name.clone(), &[values.len()], Payload::F64(values)).unwrap(),
            Entry::new(format!("{name}/ints"), &[ints.len()], Payload::U32(ints)).unwrap(),
        ];
        let bytes = encode(&entries).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 0usize..500, seed: u64, epoch in 0usize..100) {
        let mut o = epoch_order(n, seed, epoch);
        o.sort_unstable();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn preset_text_round_trips() {
    for name in PRESETS {
        let cfg = ModelConfig::preset(name).unwrap();
        let back = ModelConfig::from_text(&cfg.to_text(), ModelConfig::preset("micro-toy").unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}
