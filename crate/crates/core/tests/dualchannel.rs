mod common;

use proptest::prelude::*;
use sentiment_core::dualchannel::{
    self, attention_pool, attention_weights, bisru, cnn_channel, lstm_forward, max_pool_seq,
    AttentionParams, FusionConfig, FusionModel, FusionTrainConfig, LstmCellParams, Recurrent,
    Variant,
};
use sentiment_core::embeddings::EmbeddingMatrix;
use sentiment_core::optim::{FlatParams, GradCheckConfig};
use sentiment_core::textdata::bundled_toy_corpus;
use sentiment_core::Tensor;

fn micro(variant: Variant, seed: u64) -> FusionModel<f64> {
    let config = FusionConfig {
        variant,
        kernels: vec![(2, 2), (3, 2)],
        hidden: 3,
        attention: 3,
        num_classes: 2,
    };
    FusionModel::new(config, EmbeddingMatrix::init_gaussian(6, 4, seed), seed).unwrap()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn end_to_end_gradient_for_every_variant() {
    let corpus = common::corpus(6, &[(vec![1, 2, 3, 4], Some(0)), (vec![5, 2], Some(1))]);
    for (variant, seed) in Variant::ALL
        .into_iter()
        .flat_map(|v| (0..5).map(move |s| (v, s)))
    {
        let model = micro(variant, seed);
        let report = dualchannel::check_gradient(
            &model,
            &corpus,
            usize::MAX,
            0,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{variant}\n{report}");
        assert_eq!(report.entries.len(), FlatParams::from_model(&model).len());
    }
}

#[test]
fn tape_and_direct_forward_agree() {
    let corpus = common::corpus(
        6,
        &[
            (vec![1, 2, 3], Some(0)),
            (vec![4], Some(1)),
            (vec![5, 1, 2, 3, 4], Some(1)),
        ],
    );
    for variant in Variant::ALL {
        let model = micro(variant, 8);
        let examples: Vec<_> = corpus.examples.iter().collect();
        let (tape, _) = dualchannel::batch_gradient(&model, &examples, true).unwrap();
        let direct = dualchannel::mean_loss(&model, &corpus).unwrap();
        assert!(
            (tape - direct).abs() <= 1e-13,
            "{variant}: {tape} vs {direct}"
        );
    }
}

#[test]
fn bisru_matches_hand_unrolled_recurrence() {
    let model = micro(Variant::Full, 11);
    let Some(Recurrent::Sru { fwd, bwd }) = &model.recurrent else {
        unreachable!()
    };
    let x = model.embeddings.gather(&[3, 1, 4]).unwrap();
    let got = rows(&bisru(&x, fwd, bwd).unwrap());
    let expected = common::bisru_unrolled(&rows(&x), fwd, bwd);
    for (g, e) in got.iter().flatten().zip(expected.iter().flatten()) {
        assert!((g - e).abs() <= 1e-15);
    }
}

#[test]
fn bisru_palindrome_symmetry() {
    let model = micro(Variant::Full, 2);
    let Some(Recurrent::Sru { fwd, .. }) = &model.recurrent else {
        unreachable!()
    };
    let x = model.embeddings.gather(&[1, 2, 3, 2, 1]).unwrap();
    let h = bisru(&x, fwd, fwd).unwrap();
    let d = 3;
    for i in 0..5 {
        assert_eq!(&h.row(i)[..d], &h.row(4 - i)[d..]);
    }
    let one = bisru(&model.embeddings.gather(&[2]).unwrap(), fwd, fwd).unwrap();
    assert_eq!(one.shape(), &[1, 2 * d]);
}

#[test]
fn attention_two_step_by_hand() {
    // W_a = I, b_a = 0, v_a = (1, 0): scores tanh(h_i[0]).
    let p = AttentionParams::<f64> {
        w_a: Tensor::identity(2),
        b_a: Tensor::zeros(&[2]),
        v_a: Tensor::vector(vec![1.0, 0.0]),
    };
    let h = Tensor::from_f64(&[2, 2], &[1.0, 2.0, -1.0, 4.0]).unwrap();
    let (e1, e2) = (1.0f64.tanh(), (-1.0f64).tanh());
    let a1 = e1.exp() / (e1.exp() + e2.exp());
    let a2 = 1.0 - a1;
    let alpha = attention_weights(&h, &p).unwrap();
    assert!((alpha.data()[0] - a1).abs() < 1e-15);
    assert!((alpha.sum() - 1.0).abs() < 1e-15);
    let out = attention_pool(&h, &p).unwrap();
    assert!((out.data()[0] - (a1 - a2)).abs() < 1e-15);
    assert!((out.data()[1] - (2.0 * a1 + 4.0 * a2)).abs() < 1e-14);
}

#[test]
fn lstm_hand_recurrence() {
    let zero = LstmCellParams::<f64> {
        w: Tensor::zeros(&[8, 3]),
        u: Tensor::zeros(&[8, 2]),
        b: Tensor::zeros(&[8]),
    };
    let x = Tensor::from_f64(&[3, 3], &[0.5; 9]).unwrap();
    let h = lstm_forward(&x, &zero).unwrap();
    assert_eq!(h.shape(), &[3, 2]);
    assert!(h.data().iter().all(|&v| v == 0.0));

    // Candidate fixed at g = 0.8 and all gates at 0.5: c_t = 0.5·c_{t−1} + 0.4.
    let mut b = vec![0.0; 8];
    b[4] = 0.8f64.atanh();
    b[5] = 0.8f64.atanh();
    let p = LstmCellParams {
        b: Tensor::vector(b),
        ..zero
    };
    let h = lstm_forward(&x, &p).unwrap();
    let mut c = 0.0f64;
    for t in 0..3 {
        c = 0.5 * c + 0.5 * 0.8;
        assert!((h.row(t)[0] - 0.5 * c.tanh()).abs() < 1e-15);
    }
}

#[test]
fn pooling_order_sensitivity() {
    let model = micro(Variant::Full, 4);
    let x = model.embeddings.gather(&[1, 2, 3, 4]).unwrap();
    let y = model.embeddings.gather(&[4, 2, 1, 3]).unwrap();
    let Some(Recurrent::Sru { fwd, bwd }) = &model.recurrent else {
        unreachable!()
    };
    let h = bisru(&x, fwd, bwd).unwrap();
    let permuted = Tensor::from_vec(
        &[4, 6],
        [3, 0, 2, 1]
            .iter()
            .flat_map(|&i| h.row(i).to_vec())
            .collect(),
    )
    .unwrap();
    assert_eq!(max_pool_seq(&h).unwrap(), max_pool_seq(&permuted).unwrap());
    let cnn = model.cnn.as_ref().unwrap();
    assert_ne!(cnn_channel(&x, cnn).unwrap(), cnn_channel(&y, cnn).unwrap());
}

fn toy_model(variant: Variant) -> FusionModel<f64> {
    let corpus = bundled_toy_corpus();
    let config = FusionConfig {
        variant,
        kernels: vec![(2, 8), (3, 8)],
        hidden: 8,
        attention: 8,
        num_classes: 2,
    };
    FusionModel::new(
        config,
        EmbeddingMatrix::init_gaussian(corpus.vocab.len(), 16, 0),
        0,
    )
    .unwrap()
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let corpus = bundled_toy_corpus();
    let mut model = toy_model(Variant::Full);
    let before = model.clone();
    let config = FusionTrainConfig {
        epochs: 2,
        lr: 0.0,
        ..Default::default()
    };
    dualchannel::train_fusion(&mut model, &corpus, &config, |_| {}).unwrap();
    assert_eq!(model, before);
}

#[test]
fn toy_corpus_is_fit_within_fifty_epochs() {
    let corpus = bundled_toy_corpus();
    let mut model = toy_model(Variant::Full);
    let config = FusionTrainConfig {
        epochs: 50,
        batch: 8,
        lr: 0.05,
        ..Default::default()
    };
    let history = dualchannel::train_fusion(&mut model, &corpus, &config, |_| {}).unwrap();
    assert_eq!(history.final_accuracy(), Some(1.0));
    for w in history.epochs[5..].windows(2) {
        assert!(
            w[1].loss <= w[0].loss,
            "loss rose at epoch {}: {} -> {}",
            w[1].epoch,
            w[0].loss,
            w[1].loss
        );
    }
}

#[test]
fn training_is_deterministic() {
    let corpus = bundled_toy_corpus();
    let config = FusionTrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let run = |parallel: bool| {
        let mut model = toy_model(Variant::BiLstm);
        let config = FusionTrainConfig {
            parallel,
            ..config.clone()
        };
        let h = dualchannel::train_fusion(&mut model, &corpus, &config, |_| {}).unwrap();
        (
            h.epochs
                .iter()
                .map(|e| (e.loss.to_bits(), e.accuracy.to_bits()))
                .collect::<Vec<_>>(),
            model,
        )
    };
    let (a, ma) = run(true);
    let (b, mb) = run(true);
    let (c, _) = run(false);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert_eq!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn output_is_a_distribution(seed in 0u64..1000, scale in 0.1f64..20.0, len in 1usize..7) {
        let mut model = micro(Variant::ALL[(seed % 4) as usize], seed);
        model.w_out = model.w_out.scale(scale);
        let tokens: Vec<usize> = (0..len).map(|i| (i * 7 + seed as usize) % 6).collect();
        let h = dualchannel::fuse_and_classify(&model, &tokens).unwrap();
        prop_assert!((h.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(h.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
