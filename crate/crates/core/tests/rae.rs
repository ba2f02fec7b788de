mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentiment_core::optim::{FlatParams, GradCheckConfig, LbfgsConfig, ParamSet};
use sentiment_core::rae::{self, greedy_build_tree, sentence_leaves};
use sentiment_core::textdata::bundled_toy_corpus;

fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, m: usize) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 2 + (seed as usize % 3);
        let p = common::params(5, 3, 2, 0.4, 1e-3, seed);
        let c = common::corpus(
            5,
            &[
                (random_sentence(&mut rng, 5, m), Some(seed as usize % 2)),
                (random_sentence(&mut rng, 5, m), None),
            ],
        );
        let report =
            rae::check_gradient(&c, &p, usize::MAX, seed, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "seed {seed}\n{report}");
        assert!(report.max_rel_error <= 1e-5);
    }
}

#[test]
fn gradient_route_reports_the_direct_objective() {
    let p = common::params(6, 4, 2, 0.3, 1e-2, 3);
    let c = common::corpus(
        6,
        &[
            (vec![1, 2, 3, 4], Some(1)),
            (vec![5, 1], Some(0)),
            (vec![2], Some(1)),
        ],
    );
    let (f, g) = rae::objective_gradient(&c, &p).unwrap();
    let direct = rae::dataset_objective(&c, &p).unwrap();
    assert!((f - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    assert_eq!(g.len(), p.num_params());
}

#[test]
fn frozen_embeddings_leave_the_manifest() {
    let mut p = common::params(6, 3, 2, 0.5, 0.0, 1);
    let full = p.num_params();
    p.embeddings.trainable = false;
    assert_eq!(p.num_params(), full - 18);
    let c = common::corpus(6, &[(vec![1, 2, 3], Some(1))]);
    let report = rae::check_gradient(&c, &p, usize::MAX, 0, &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn greedy_never_beats_exhaustive_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for i in 0..50u64 {
        let m = 1 + (i as usize % 4);
        let p = common::params(8, 3, 2, 0.5, 0.0, i);
        let tokens = random_sentence(&mut rng, 8, m);
        let leaves = sentence_leaves(&tokens, &p).unwrap();
        let raw: Vec<Vec<f64>> = leaves.iter().map(|l| l.data().to_vec()).collect();
        let greedy = greedy_build_tree(&leaves, &p).unwrap().total_rec_error();
        let best = common::exhaustive_min_rec_error(&p, &raw);
        assert!(
            greedy >= best - 1e-12,
            "greedy {greedy} < exhaustive {best}"
        );
        if m <= 2 {
            assert!((greedy - best).abs() <= 1e-12);
        }
    }
}

#[test]
fn tree_nodes_match_hand_computed_merges() {
    let p = common::params(8, 3, 2, 0.5, 0.0, 77);
    let leaves = sentence_leaves(&[1, 5, 2, 7], &p).unwrap();
    let tree = greedy_build_tree(&leaves, &p).unwrap();
    for node in tree.internal() {
        let (l, r) = node.children.unwrap();
        let (a, b) = (&tree.nodes[l], &tree.nodes[r]);
        let (parent, err) = common::merge(
            &p,
            a.vector.data(),
            a.word_count,
            b.vector.data(),
            b.word_count,
        );
        for (x, y) in node.vector.data().iter().zip(&parent) {
            assert!((x - y).abs() <= 1e-14);
        }
        assert!((node.rec_error - err).abs() <= 1e-12);
    }
}

#[test]
fn lbfgs_fits_the_toy_corpus() {
    let corpus = bundled_toy_corpus();
    let mut p = common::params(corpus.vocab.len(), 10, 2, 0.2, 1e-4, 0);
    let config = LbfgsConfig {
        max_iter: 200,
        ..LbfgsConfig::default()
    };
    let outcome = rae::train_lbfgs(&mut p, &corpus, &config).unwrap();
    assert!(outcome.iterations <= 200);
    assert!(outcome.trace.windows(2).all(|w| w[1].f <= w[0].f));
    let acc = rae::accuracy(&corpus, &p).unwrap();
    assert!(acc >= 0.9, "train accuracy {acc}");
}

#[test]
fn objective_is_deterministic() {
    let corpus = bundled_toy_corpus();
    let p = common::params(corpus.vocab.len(), 6, 2, 0.5, 1e-3, 4);
    let a = rae::objective_gradient(&corpus, &p).unwrap();
    let b = rae::objective_gradient(&corpus, &p).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn flat_round_trip_is_exact() {
    let mut p = common::params(7, 4, 3, 0.5, 0.0, 2);
    let flat = FlatParams::from_model(&p);
    let mut other = common::params(7, 4, 3, 0.5, 0.0, 9);
    flat.write_into(&mut other).unwrap();
    assert_eq!(FlatParams::from_model(&other).values, flat.values);
    p.embeddings.trainable = false;
    assert!(FlatParams::from_model(&p).write_into(&mut other).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn structural_invariants(seed in 0u64..10_000, m in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::params(10, 4, 3, 0.5, 0.0, seed);
        let tokens = random_sentence(&mut rng, 10, m);
        let tree = greedy_build_tree(&sentence_leaves(&tokens, &p).unwrap(), &p).unwrap();
        prop_assert_eq!(tree.leaves().len(), m);
        prop_assert_eq!(tree.internal().len(), m - 1);
        prop_assert_eq!(tree.root().word_count, m);
        for node in tree.internal() {
            prop_assert!((node.vector.l2_norm() - 1.0).abs() <= 1e-12);
            let (l, r) = node.children.unwrap();
            let (nl, nr) = (tree.nodes[l].word_count, tree.nodes[r].word_count);
            let total = (nl + nr) as f64;
            prop_assert!((nl as f64 / total + nr as f64 / total - 1.0).abs() <= 1e-15);
            let h = node.class_dist.as_ref().unwrap();
            prop_assert!((h.sum() - 1.0).abs() <= 1e-12);
        }
    }
}
