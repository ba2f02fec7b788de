//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use sentiment_core::embeddings::EmbeddingMatrix;
use sentiment_core::rae::{RaeHyper, RaeParams};
use sentiment_core::textdata::{LabeledCorpus, LabeledExample, SplitSpec, Vocabulary, UNK_TOKEN};

/// Row-major matrix-vector product over raw slices.
fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum())
        .collect()
}

/// Parent vector and weighted reconstruction error, written out by hand.
pub fn merge(p: &RaeParams<f64>, a: &[f64], na: usize, b: &[f64], nb: usize) -> (Vec<f64>, f64) {
    let n = a.len();
    let z: Vec<f64> = a.iter().chain(b).copied().collect();
    let f: Vec<f64> = matvec(p.w_g.data(), n, &z)
        .iter()
        .zip(p.b_g.data())
        .map(|(x, b)| (x + b).tanh())
        .collect();
    let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    let parent: Vec<f64> = if norm < 1e-12 {
        f
    } else {
        f.iter().map(|x| x / norm).collect()
    };
    let rec: Vec<f64> = matvec(p.w_r.data(), 2 * n, &parent)
        .iter()
        .zip(p.b_r.data())
        .map(|(x, b)| x + b)
        .collect();
    let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let total = (na + nb) as f64;
    let err = na as f64 / total * sq(a, &rec[..n]) + nb as f64 / total * sq(b, &rec[n..]);
    (parent, err)
}

/// Minimum total reconstruction error over every merge order.
pub fn exhaustive_min_rec_error(p: &RaeParams<f64>, leaves: &[Vec<f64>]) -> f64 {
    fn go(p: &RaeParams<f64>, frontier: Vec<(Vec<f64>, usize)>) -> f64 {
        if frontier.len() == 1 {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for i in 0..frontier.len() - 1 {
            let (parent, err) = merge(
                p,
                &frontier[i].0,
                frontier[i].1,
                &frontier[i + 1].0,
                frontier[i + 1].1,
            );
            let mut next = frontier.clone();
            next[i] = (parent, frontier[i].1 + frontier[i + 1].1);
            next.remove(i + 1);
            best = best.min(err + go(p, next));
        }
        best
    }
    go(p, leaves.iter().map(|l| (l.clone(), 1)).collect())
}

pub fn params(
    vocab: usize,
    n: usize,
    classes: usize,
    theta: f64,
    mu: f64,
    seed: u64,
) -> RaeParams<f64> {
    let hyper = RaeHyper {
        theta,
        mu,
        num_classes: classes,
    };
    RaeParams::new(
        EmbeddingMatrix::init_gaussian(vocab, n, seed ^ 0x5eed),
        hyper,
        seed,
    )
    .unwrap()
}

/// Corpus over a synthetic vocabulary `<unk>, w1, …` from token sequences.
pub fn corpus(vocab: usize, sentences: &[(Vec<usize>, Option<usize>)]) -> LabeledCorpus {
    let mut tokens = vec![UNK_TOKEN.to_string()];
    tokens.extend((1..vocab).map(|i| format!("w{i}")));
    let vocab = Vocabulary::from_tokens(tokens).unwrap();
    let examples = sentences
        .iter()
        .map(|(t, label)| LabeledExample {
            raw_text: t
                .iter()
                .map(|&i| vocab.token(i).unwrap())
                .collect::<Vec<_>>()
                .join(" "),
            tokens: t.clone(),
            label: label.unwrap_or(0),
            labeled: label.is_some(),
        })
        .collect();
    LabeledCorpus {
        name: "synthetic".into(),
        examples,
        num_classes: 2,
        vocab,
        split_spec: SplitSpec::default(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SRU recurrence written step by step over plain vectors.
pub fn sru_unrolled(
    x: &[Vec<f64>],
    p: &sentiment_core::dualchannel::SruCellParams<f64>,
) -> Vec<Vec<f64>> {
    let d = p.b_f.len();
    let mut c = vec![0.0; d];
    let mut out = Vec::new();
    for xt in x {
        let xtil = matvec(p.w.data(), d, xt);
        let f = matvec(p.w_f.data(), d, xt);
        let r = matvec(p.w_r.data(), d, xt);
        let mut h = vec![0.0; d];
        for j in 0..d {
            let fj = sigmoid(f[j] + p.b_f.data()[j]);
            let rj = sigmoid(r[j] + p.b_r.data()[j]);
            c[j] = fj * c[j] + (1.0 - fj) * xtil[j];
            h[j] = rj * c[j].tanh();
        }
        out.push(h);
    }
    out
}

/// `[h_fwd_i ; h_bwd_i]` with the backward cell run on the reversed input.
pub fn bisru_unrolled(
    x: &[Vec<f64>],
    fwd: &sentiment_core::dualchannel::SruCellParams<f64>,
    bwd: &sentiment_core::dualchannel::SruCellParams<f64>,
) -> Vec<Vec<f64>> {
    let f = sru_unrolled(x, fwd);
    let rev: Vec<Vec<f64>> = x.iter().rev().cloned().collect();
    let mut b = sru_unrolled(&rev, bwd);
    b.reverse();
    f.into_iter()
        .zip(b)
        .map(|(mut a, b)| {
            a.extend(b);
            a
        })
        .collect()
}
