//! Dual-channel fusion classifier.
//!
//! A CNN channel (several kernel widths, tanh, max-over-time pooling)
//! extracts local features. A bidirectional SRU channel reads the sentence
//! in both directions and is summarized by additive attention and by
//! coordinate-wise max pooling. The concatenated features feed a softmax
//! output layer.
//!
//! SRU cell, per step:
//!
//! ```text
//! x̃ = W·x    f = σ(W_f·x + b_f)    r = σ(W_r·x + b_r)
//! c_t = f ⊙ c_{t−1} + (1 − f) ⊙ x̃    h_t = r ⊙ tanh(c_t)
//! ```
//!
//! The recurrence is elementwise, so all matrix products run over the whole
//! sequence at once. The BiLSTM variant swaps in a standard LSTM cell.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::numerics::{argmax, sigmoid, Graph, NodeId, Tensor};
use crate::optim::{
    grad_check, write_flat, FlatParams, GradCheckConfig, GradCheckReport, MomentumSgd, ParamSet,
    DEFAULT_MOMENTUM,
};
use crate::rae::cross_entropy_loss;
use crate::scalar::Scalar;
use crate::textdata::{LabeledCorpus, LabeledExample};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// CNN plus BiSRU with attention and max pooling.
    #[default]
    Full,
    #[serde(rename = "cnn")]
    CnnOnly,
    #[serde(rename = "bisru")]
    BiSruOnly,
    /// CNN plus BiLSTM with attention and max pooling.
    BiLstm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::CnnOnly,
        Variant::BiSruOnly,
        Variant::BiLstm,
    ];

    pub fn has_cnn(self) -> bool {
        !matches!(self, Variant::BiSruOnly)
    }

    pub fn has_sru(self) -> bool {
        matches!(self, Variant::Full | Variant::BiSruOnly)
    }

    pub fn has_lstm(self) -> bool {
        matches!(self, Variant::BiLstm)
    }

    pub fn has_recurrent(self) -> bool {
        self.has_sru() || self.has_lstm()
    }

    /// Display name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "CNN-BiSRU",
            Variant::CnnOnly => "CNN",
            Variant::BiSruOnly => "BiSRU",
            Variant::BiLstm => "CNN-BiLSTM",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "cnn" => Ok(Variant::CnnOnly),
            "bisru" => Ok(Variant::BiSruOnly),
            "bilstm" => Ok(Variant::BiLstm),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?} (expected full, cnn, bisru or bilstm)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::CnnOnly => "cnn",
            Variant::BiSruOnly => "bisru",
            Variant::BiLstm => "bilstm",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub variant: Variant,
    /// `(width, filters)` per kernel group.
    pub kernels: Vec<(usize, usize)>,
    /// Recurrent hidden size `d`.
    pub hidden: usize,
    /// Attention score dimension.
    pub attention: usize,
    pub num_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            kernels: vec![(3, 100), (4, 100), (5, 100)],
            hidden: 100,
            attention: 100,
            num_classes: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant.has_cnn() {
            if self.kernels.is_empty() {
                return Err(Error::InvalidArgument(
                    "at least one kernel group is required".into(),
                ));
            }
            if let Some(&(w, c)) = self.kernels.iter().find(|(w, c)| *w == 0 || *c == 0) {
                return Err(Error::InvalidArgument(format!(
                    "kernel width and filter count must be positive, got ({w}, {c})"
                )));
            }
        }
        if self.variant.has_recurrent() && (self.hidden == 0 || self.attention == 0) {
            return Err(Error::InvalidArgument(
                "hidden and attention sizes must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        Ok(())
    }

    /// Length of the fused feature vector.
    pub fn fused_dim(&self) -> usize {
        let cnn: usize = if self.variant.has_cnn() {
            self.kernels.iter().map(|&(_, c)| c).sum()
        } else {
            0
        };
        let rnn = if self.variant.has_recurrent() {
            4 * self.hidden
        } else {
            0
        };
        cnn + rnn
    }

    pub fn max_width(&self) -> usize {
        self.kernels.iter().map(|&(w, _)| w).max().unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelGroup<T> {
    pub width: usize,
    /// `[c × width·n]`.
    pub weights: Tensor<T>,
    /// `[c]`.
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnChannelParams<T> {
    pub kernels: Vec<KernelGroup<T>>,
}

impl<T: Scalar> CnnChannelParams<T> {
    pub fn max_width(&self) -> usize {
        self.kernels.iter().map(|k| k.width).max().unwrap_or(1)
    }

    pub fn output_dim(&self) -> usize {
        self.kernels.iter().map(|k| k.bias.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SruCellParams<T> {
    /// `[d × n]` each.
    pub w: Tensor<T>,
    pub w_f: Tensor<T>,
    pub b_f: Tensor<T>,
    pub w_r: Tensor<T>,
    pub b_r: Tensor<T>,
}

impl<T: Scalar> SruCellParams<T> {
    pub fn hidden(&self) -> usize {
        self.b_f.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams<T> {
    /// Input weights `[4d × n]`, gate blocks in `i, f, g, o` order.
    pub w: Tensor<T>,
    /// Recurrent weights `[4d × d]`.
    pub u: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LstmCellParams<T> {
    pub fn hidden(&self) -> usize {
        self.u.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    /// `[a × 2d]`.
    pub w_a: Tensor<T>,
    pub b_a: Tensor<T>,
    pub v_a: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Recurrent<T> {
    Sru {
        fwd: SruCellParams<T>,
        bwd: SruCellParams<T>,
    },
    Lstm {
        fwd: LstmCellParams<T>,
        bwd: LstmCellParams<T>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel<T> {
    pub config: FusionConfig,
    pub embeddings: EmbeddingMatrix<T>,
    pub cnn: Option<CnnChannelParams<T>>,
    pub recurrent: Option<Recurrent<T>>,
    pub attn: Option<AttentionParams<T>>,
    /// `[T × fused_dim]`.
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

fn glorot<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape matches")
}

impl<T: Scalar> SruCellParams<T> {
    fn init(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: glorot(d, n, rng),
            w_f: glorot(d, n, rng),
            b_f: Tensor::zeros(&[d]),
            w_r: glorot(d, n, rng),
            b_r: Tensor::zeros(&[d]),
        }
    }
}

impl<T: Scalar> LstmCellParams<T> {
    fn init(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: glorot(4 * d, n, rng),
            u: glorot(4 * d, d, rng),
            b: Tensor::zeros(&[4 * d]),
        }
    }
}

impl<T: Scalar> FusionModel<T> {
    /// Glorot-uniform weights and zero biases around the given embeddings.
    pub fn new(config: FusionConfig, embeddings: EmbeddingMatrix<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = embeddings.dim();
        let d = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cnn = config.variant.has_cnn().then(|| CnnChannelParams {
            kernels: config
                .kernels
                .iter()
                .map(|&(width, c)| KernelGroup {
                    width,
                    weights: glorot(c, width * n, &mut rng),
                    bias: Tensor::zeros(&[c]),
                })
                .collect(),
        });
        let recurrent = if config.variant.has_sru() {
            Some(Recurrent::Sru {
                fwd: SruCellParams::init(d, n, &mut rng),
                bwd: SruCellParams::init(d, n, &mut rng),
            })
        } else if config.variant.has_lstm() {
            Some(Recurrent::Lstm {
                fwd: LstmCellParams::init(d, n, &mut rng),
                bwd: LstmCellParams::init(d, n, &mut rng),
            })
        } else {
            None
        };
        let attn = config.variant.has_recurrent().then(|| AttentionParams {
            w_a: glorot(config.attention, 2 * d, &mut rng),
            b_a: Tensor::zeros(&[config.attention]),
            v_a: Tensor::from_vec(
                &[config.attention],
                glorot(config.attention, 1, &mut rng).into_data(),
            )
            .expect("shape matches"),
        });
        let w_out = glorot(config.num_classes, config.fused_dim(), &mut rng);
        Ok(Self {
            b_out: Tensor::zeros(&[config.num_classes]),
            config,
            embeddings,
            cnn,
            recurrent,
            attn,
            w_out,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Every tensor, frozen or not, under stable names.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.named_params();
        if !self.embeddings.trainable {
            out.push(("embeddings".into(), self.embeddings.matrix()));
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names = self.state().into_iter().map(|(n, _)| n).collect::<Vec<_>>();
        names.into_iter().zip(self.tensors_mut(true)).collect()
    }

    fn tensors_mut(&mut self, with_embeddings: bool) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        if let Some(cnn) = &mut self.cnn {
            for k in &mut cnn.kernels {
                out.push(&mut k.weights);
                out.push(&mut k.bias);
            }
        }
        match &mut self.recurrent {
            Some(Recurrent::Sru { fwd, bwd }) => {
                for c in [fwd, bwd] {
                    out.extend([&mut c.w, &mut c.w_f, &mut c.b_f, &mut c.w_r, &mut c.b_r]);
                }
            }
            Some(Recurrent::Lstm { fwd, bwd }) => {
                for c in [fwd, bwd] {
                    out.extend([&mut c.w, &mut c.u, &mut c.b]);
                }
            }
            None => {}
        }
        if let Some(a) = &mut self.attn {
            out.extend([&mut a.w_a, &mut a.b_a, &mut a.v_a]);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        if with_embeddings {
            out.push(self.embeddings.matrix_mut());
        }
        out
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        if let Some(cnn) = &self.cnn {
            for k in &cnn.kernels {
                out.push((format!("cnn.k{}.weights", k.width), &k.weights));
                out.push((format!("cnn.k{}.bias", k.width), &k.bias));
            }
        }
        match &self.recurrent {
            Some(Recurrent::Sru { fwd, bwd }) => {
                for (dir, c) in [("fwd", fwd), ("bwd", bwd)] {
                    out.push((format!("sru_{dir}.w"), &c.w));
                    out.push((format!("sru_{dir}.w_f"), &c.w_f));
                    out.push((format!("sru_{dir}.b_f"), &c.b_f));
                    out.push((format!("sru_{dir}.w_r"), &c.w_r));
                    out.push((format!("sru_{dir}.b_r"), &c.b_r));
                }
            }
            Some(Recurrent::Lstm { fwd, bwd }) => {
                for (dir, c) in [("fwd", fwd), ("bwd", bwd)] {
                    out.push((format!("lstm_{dir}.w"), &c.w));
                    out.push((format!("lstm_{dir}.u"), &c.u));
                    out.push((format!("lstm_{dir}.b"), &c.b));
                }
            }
            None => {}
        }
        if let Some(a) = &self.attn {
            out.push(("attn.w_a".into(), &a.w_a));
            out.push(("attn.b_a".into(), &a.b_a));
            out.push(("attn.v_a".into(), &a.v_a));
        }
        out.push(("out.w".into(), &self.w_out));
        out.push(("out.b".into(), &self.b_out));
        if self.embeddings.trainable {
            out.push(("embeddings".into(), self.embeddings.matrix()));
        }
        out
    }
}

impl<T: Scalar> ParamSet<T> for FusionModel<T> {
    fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let trainable = self.embeddings.trainable;
        self.tensors_mut(trainable)
    }
}

fn check_sequence<T: Scalar>(x: &Tensor<T>, n: usize, op: &'static str) -> Result<()> {
    if !x.is_matrix() || x.rows() == 0 || x.cols() != n {
        return Err(Error::dim(op, x.shape(), &[n]));
    }
    Ok(())
}

/// Convolution over `x` (`[m×n]`, one word per row) with every kernel group,
/// tanh, and max-over-time pooling. Sentences shorter than the widest
/// kernel are right-padded with zero rows.
pub fn cnn_channel<T: Scalar>(x: &Tensor<T>, p: &CnnChannelParams<T>) -> Result<Tensor<T>> {
    if !x.is_matrix() || x.rows() == 0 {
        return Err(Error::dim("cnn_channel", x.shape(), &[]));
    }
    let (m, n) = (x.rows(), x.cols());
    let len = m.max(p.max_width());
    let mut out = Vec::with_capacity(p.output_dim());
    for k in &p.kernels {
        if k.weights.cols() != k.width * n {
            return Err(Error::dim("cnn_channel", k.weights.shape(), x.shape()));
        }
        let mut best = vec![T::neg_infinity(); k.bias.len()];
        for pos in 0..=len - k.width {
            let mut window = vec![T::zero(); k.width * n];
            for j in 0..k.width {
                if pos + j < m {
                    window[j * n..(j + 1) * n].copy_from_slice(x.row(pos + j));
                }
            }
            let resp = k
                .weights
                .matmul(&Tensor::vector(window))?
                .add(&k.bias)?
                .tanh();
            for (b, &r) in best.iter_mut().zip(resp.data()) {
                if r > *b {
                    *b = r;
                }
            }
        }
        out.extend(best);
    }
    Ok(Tensor::vector(out))
}

/// Forward SRU pass over the rows of `x`, returning `[m×d]`.
pub fn sru_forward<T: Scalar>(x: &Tensor<T>, p: &SruCellParams<T>) -> Result<Tensor<T>> {
    check_sequence(x, p.w.cols(), "sru_forward")?;
    let d = p.hidden();
    let mut c = vec![T::zero(); d];
    let mut out = Vec::with_capacity(x.rows() * d);
    for t in 0..x.rows() {
        let xt = Tensor::vector(x.row(t).to_vec());
        let xtil = p.w.matmul(&xt)?;
        let f = p.w_f.matmul(&xt)?.add(&p.b_f)?;
        let r = p.w_r.matmul(&xt)?.add(&p.b_r)?;
        for j in 0..d {
            let fj = sigmoid(f.data()[j]);
            c[j] = fj * c[j] + (T::one() - fj) * xtil.data()[j];
            out.push(sigmoid(r.data()[j]) * c[j].tanh());
        }
    }
    Tensor::from_vec(&[x.rows(), d], out)
}

/// Forward LSTM pass (zero initial state) over the rows of `x`.
pub fn lstm_forward<T: Scalar>(x: &Tensor<T>, p: &LstmCellParams<T>) -> Result<Tensor<T>> {
    check_sequence(x, p.w.cols(), "lstm_forward")?;
    let d = p.hidden();
    let mut h = Tensor::zeros(&[d]);
    let mut c = vec![T::zero(); d];
    let mut out = Vec::with_capacity(x.rows() * d);
    for t in 0..x.rows() {
        let xt = Tensor::vector(x.row(t).to_vec());
        let z = p.w.matmul(&xt)?.add(&p.u.matmul(&h)?)?.add(&p.b)?;
        let z = z.data();
        let mut hn = Vec::with_capacity(d);
        for j in 0..d {
            let (i, f, g, o) = (
                sigmoid(z[j]),
                sigmoid(z[d + j]),
                z[2 * d + j].tanh(),
                sigmoid(z[3 * d + j]),
            );
            c[j] = f * c[j] + i * g;
            hn.push(o * c[j].tanh());
        }
        out.extend_from_slice(&hn);
        h = Tensor::vector(hn);
    }
    Tensor::from_vec(&[x.rows(), d], out)
}

fn reverse_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = (0..x.rows())
        .rev()
        .flat_map(|i| x.row(i).to_vec())
        .collect();
    Tensor::from_vec(&[x.rows(), x.cols()], data).expect("shape matches")
}

fn bidirectional<T: Scalar>(
    x: &Tensor<T>,
    run: impl Fn(&Tensor<T>, bool) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let f = run(x, true)?;
    let b = reverse_rows(&run(&reverse_rows(x), false)?);
    let (m, d) = (f.rows(), f.cols());
    let data = (0..m)
        .flat_map(|i| f.row(i).iter().chain(b.row(i)).copied().collect::<Vec<_>>())
        .collect();
    Tensor::from_vec(&[m, 2 * d], data)
}

/// Row `i` is `[h_fwd_i ; h_bwd_i]`, the backward cell having read the
/// sentence right to left.
pub fn bisru<T: Scalar>(
    x: &Tensor<T>,
    fwd: &SruCellParams<T>,
    bwd: &SruCellParams<T>,
) -> Result<Tensor<T>> {
    bidirectional(x, |s, forward| {
        sru_forward(s, if forward { fwd } else { bwd })
    })
}

pub fn bilstm<T: Scalar>(
    x: &Tensor<T>,
    fwd: &LstmCellParams<T>,
    bwd: &LstmCellParams<T>,
) -> Result<Tensor<T>> {
    bidirectional(x, |s, forward| {
        lstm_forward(s, if forward { fwd } else { bwd })
    })
}

/// `softmax(v_aᵀ·tanh(W_a·h_i + b_a))` over positions.
pub fn attention_weights<T: Scalar>(h: &Tensor<T>, p: &AttentionParams<T>) -> Result<Tensor<T>> {
    check_sequence(h, p.w_a.cols(), "attention_pool")?;
    let scores = (0..h.rows())
        .map(|i| {
            let s = p
                .w_a
                .matmul(&Tensor::vector(h.row(i).to_vec()))?
                .add(&p.b_a)?
                .tanh();
            s.dot(&p.v_a)
        })
        .collect::<Result<Vec<T>>>()?;
    Tensor::vector(scores).softmax()
}

/// Attention-weighted sum of the rows of `h`.
pub fn attention_pool<T: Scalar>(h: &Tensor<T>, p: &AttentionParams<T>) -> Result<Tensor<T>> {
    let alpha = attention_weights(h, p)?;
    let mut out = vec![T::zero(); h.cols()];
    for (i, &a) in alpha.data().iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(h.row(i)) {
            *o += a * v;
        }
    }
    Ok(Tensor::vector(out))
}

/// Coordinate-wise maximum over the rows of `h`.
pub fn max_pool_seq<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    if !h.is_matrix() || h.rows() == 0 {
        return Err(Error::dim("max_pool_seq", h.shape(), &[]));
    }
    let mut out = h.row(0).to_vec();
    for i in 1..h.rows() {
        for (o, &v) in out.iter_mut().zip(h.row(i)) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(Tensor::vector(out))
}

/// Fused feature vector of a sentence matrix.
pub fn fused_features<T: Scalar>(model: &FusionModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut parts = Vec::new();
    if let Some(cnn) = &model.cnn {
        parts.push(cnn_channel(x, cnn)?);
    }
    if let (Some(rec), Some(attn)) = (&model.recurrent, &model.attn) {
        let h = match rec {
            Recurrent::Sru { fwd, bwd } => bisru(x, fwd, bwd)?,
            Recurrent::Lstm { fwd, bwd } => bilstm(x, fwd, bwd)?,
        };
        parts.push(attention_pool(&h, attn)?);
        parts.push(max_pool_seq(&h)?);
    }
    Tensor::concat(&parts.iter().collect::<Vec<_>>())
}

/// Class distribution of a token sequence.
pub fn fuse_and_classify<T: Scalar>(model: &FusionModel<T>, tokens: &[usize]) -> Result<Tensor<T>> {
    let x = model.embeddings.gather(tokens)?;
    let feat = fused_features(model, &x)?;
    model.w_out.matmul(&feat)?.add(&model.b_out)?.softmax()
}

pub fn predict<T: Scalar>(model: &FusionModel<T>, tokens: &[usize]) -> Result<usize> {
    Ok(argmax(fuse_and_classify(model, tokens)?.data()))
}

/// Mean cross-entropy over `corpus`, evaluated directly.
pub fn mean_loss<T: Scalar>(model: &FusionModel<T>, corpus: &LabeledCorpus) -> Result<T> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("loss over an empty corpus".into()));
    }
    let losses: Vec<T> = corpus
        .examples
        .par_iter()
        .map(|e| cross_entropy_loss(&fuse_and_classify(model, &e.tokens)?, e.label))
        .collect::<Result<_>>()?;
    Ok(losses.into_iter().sum::<T>() / T::from_usize_lossy(corpus.len()))
}

pub fn accuracy<T: Scalar>(model: &FusionModel<T>, corpus: &LabeledCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "accuracy over an empty corpus".into(),
        ));
    }
    let predictions: Vec<usize> = corpus
        .examples
        .par_iter()
        .map(|e| predict(model, &e.tokens))
        .collect::<Result<_>>()?;
    let correct = predictions
        .iter()
        .zip(&corpus.examples)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(correct as f64 / corpus.len() as f64)
}

fn sru_graph<'p, T: Scalar>(g: &mut Graph<'p, T>, x: NodeId, ids: &[NodeId]) -> Result<NodeId> {
    let [w, w_f, b_f, w_r, b_r] = ids else {
        unreachable!("five sru tensors")
    };
    let xt = g.matmul_nt(x, *w)?;
    let f = g.matmul_nt(x, *w_f)?;
    let f = g.add_row_bias(f, *b_f)?;
    let f = g.sigmoid(f);
    let r = g.matmul_nt(x, *w_r)?;
    let r = g.add_row_bias(r, *b_r)?;
    let r = g.sigmoid(r);
    g.sru_scan(xt, f, r)
}

fn lstm_graph<'p, T: Scalar>(g: &mut Graph<'p, T>, x: NodeId, ids: &[NodeId]) -> Result<NodeId> {
    let [w, u, b] = ids else {
        unreachable!("three lstm tensors")
    };
    let gates = g.matmul_nt(x, *w)?;
    let gates = g.add_row_bias(gates, *b)?;
    g.lstm_scan(gates, *u)
}

/// Records the forward pass of one sentence on `g`. `ids` are the model
/// parameters registered in manifest order; `x` is the `[m×n]` sentence.
fn forward_graph<'p, T: Scalar>(
    model: &FusionModel<T>,
    g: &mut Graph<'p, T>,
    ids: &[NodeId],
    x: NodeId,
) -> Result<NodeId> {
    let mut next = 0;
    let mut take = |k: usize| {
        let s = &ids[next..next + k];
        next += k;
        s.to_vec()
    };
    let mut feats = Vec::new();
    if let Some(cnn) = &model.cnn {
        let pad = cnn.max_width();
        for k in &cnn.kernels {
            let [w, b] = take(2)[..] else { unreachable!() };
            let u = g.unfold(x, k.width, pad)?;
            let z = g.matmul_nt(u, w)?;
            let z = g.add_row_bias(z, b)?;
            let z = g.tanh(z);
            feats.push(g.max_rows(z)?);
        }
    }
    if let Some(rec) = &model.recurrent {
        let xr = g.reverse_rows(x)?;
        let (hf, hb) = match rec {
            Recurrent::Sru { .. } => {
                let f = take(5);
                let b = take(5);
                (sru_graph(g, x, &f)?, sru_graph(g, xr, &b)?)
            }
            Recurrent::Lstm { .. } => {
                let f = take(3);
                let b = take(3);
                (lstm_graph(g, x, &f)?, lstm_graph(g, xr, &b)?)
            }
        };
        let hb = g.reverse_rows(hb)?;
        let h = g.hcat(hf, hb)?;
        let [w_a, b_a, v_a] = take(3)[..] else {
            unreachable!()
        };
        let s = g.matmul_nt(h, w_a)?;
        let s = g.add_row_bias(s, b_a)?;
        let s = g.tanh(s);
        let e = g.matmul(s, v_a)?;
        let alpha = g.softmax(e)?;
        feats.push(g.matmul_tn(h, alpha)?);
        feats.push(g.max_rows(h)?);
    }
    let [w_out, b_out] = take(2)[..] else {
        unreachable!()
    };
    let feat = g.concat(&feats)?;
    let logits = g.matmul(w_out, feat)?;
    let logits = g.add(logits, b_out)?;
    g.softmax(logits)
}

/// Adds `scale · ∂CE/∂θ` of one example into `grad` (manifest layout) and
/// returns its cross-entropy.
fn accumulate_example<T: Scalar>(
    model: &FusionModel<T>,
    e: &LabeledExample,
    offsets: &[usize],
    scale: T,
    grad: &mut [T],
) -> Result<T> {
    let mut g = Graph::new();
    let mut ids: Vec<NodeId> = model.params().into_iter().map(|t| g.param(t)).collect();
    if model.embeddings.trainable {
        ids.pop();
    }
    let x = g.input(model.embeddings.gather(&e.tokens)?);
    let probs = forward_graph(model, &mut g, &ids, x)?;
    let loss = g.cross_entropy(probs, e.label)?;
    g.backward(loss)?;
    for (&id, &off) in ids.iter().zip(offsets) {
        let gd = g.grad(id).expect("leaf gradient").data();
        for (o, &v) in grad[off..off + gd.len()].iter_mut().zip(gd) {
            *o += scale * v;
        }
    }
    if model.embeddings.trainable {
        let gx: Vec<T> = g
            .grad(x)
            .expect("leaf gradient")
            .data()
            .iter()
            .map(|&v| scale * v)
            .collect();
        let off = *offsets.last().expect("embeddings offset");
        model
            .embeddings
            .scatter_grad(&e.tokens, &gx, &mut grad[off..]);
    }
    Ok(g.value(loss).item())
}

const CHUNK: usize = 4;

/// Mean cross-entropy over `examples` and its gradient in manifest layout.
/// Examples are processed in fixed chunks (in parallel when `parallel`) and
/// reduced in order, so the result does not depend on the thread count.
pub fn batch_gradient<T: Scalar>(
    model: &FusionModel<T>,
    examples: &[&LabeledExample],
    parallel: bool,
) -> Result<(T, Vec<T>)> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "gradient over an empty batch".into(),
        ));
    }
    let manifest = model.manifest();
    let offsets: Vec<usize> = manifest.iter().map(|s| s.offset).collect();
    let total = model.num_params();
    let scale = T::one() / T::from_usize_lossy(examples.len());
    let chunk = |batch: &[&LabeledExample]| -> Result<(T, Vec<T>)> {
        let mut grad = vec![T::zero(); total];
        let mut loss = T::zero();
        for e in batch {
            loss += accumulate_example(model, e, &offsets, scale, &mut grad)?;
        }
        Ok((loss, grad))
    };
    let partials: Vec<(T, Vec<T>)> = if parallel {
        examples
            .par_chunks(CHUNK)
            .map(chunk)
            .collect::<Result<_>>()?
    } else {
        examples.chunks(CHUNK).map(chunk).collect::<Result<_>>()?
    };
    let mut iter = partials.into_iter();
    let (mut loss, mut grad) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (o, v) in grad.iter_mut().zip(g) {
            *o += v;
        }
    }
    Ok((loss * scale, grad))
}

/// Compares tape gradients of the mean cross-entropy over `corpus` against
/// central differences of the directly evaluated loss.
pub fn check_gradient<T: Scalar>(
    model: &FusionModel<T>,
    corpus: &LabeledCorpus,
    samples: usize,
    seed: u64,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let examples: Vec<&LabeledExample> = corpus.examples.iter().collect();
    let start = FlatParams::from_model(model);
    let manifest = start.manifest.clone();
    let mut scratch = model.clone();
    let mut first = true;
    grad_check(
        |x: &[T]| {
            write_flat(x, &manifest, &mut scratch)?;
            if std::mem::take(&mut first) {
                batch_gradient(&scratch, &examples, false)
            } else {
                Ok((mean_loss(&scratch, corpus)?, Vec::new()))
            }
        },
        &start.values,
        samples,
        seed,
        config,
        Some(&manifest),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate examples of a batch on the rayon pool.
    pub parallel: bool,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 16,
            lr: 0.05,
            momentum: DEFAULT_MOMENTUM,
            seed: 0,
            parallel: true,
        }
    }
}

impl FusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy of the batches seen during the epoch.
    pub loss: f64,
    /// Training accuracy after the epoch.
    pub accuracy: f64,
    /// Wall time of the parameter updates, excluding the accuracy pass.
    pub millis: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }
}

/// Mini-batch momentum SGD on mean cross-entropy with a seeded shuffle per
/// epoch. `on_epoch` sees every record as soon as it is complete.
pub fn train_fusion<T: Scalar>(
    model: &mut FusionModel<T>,
    corpus: &LabeledCorpus,
    config: &FusionTrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingHistory> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot train on an empty corpus".into(),
        ));
    }
    if let Some(e) = corpus
        .examples
        .iter()
        .find(|e| !e.labeled || e.label >= model.config.num_classes)
    {
        return Err(Error::InvalidArgument(format!(
            "example {:?} has no usable label",
            e.raw_text
        )));
    }
    let mut opt = MomentumSgd::new(T::lit(config.lr), model.num_params());
    opt.momentum = T::lit(config.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let tokens: usize = corpus.examples.iter().map(|e| e.tokens.len()).sum();
    let mut history = TrainingHistory::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch).enumerate() {
            let examples: Vec<&LabeledExample> =
                batch.iter().map(|&i| &corpus.examples[i]).collect();
            let (loss, grad) = batch_gradient(model, &examples, config.parallel)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "training diverged in epoch {epoch}, batch {b}: loss {loss}"
                )));
            }
            loss_sum += loss.as_f64() * batch.len() as f64;
            opt.step(model, &grad);
        }
        let millis = start.elapsed().as_secs_f64() * 1e3;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / corpus.len() as f64,
            accuracy: accuracy(model, corpus)?,
            millis,
            tokens,
        };
        debug!(
            "epoch {epoch}: loss {:.6} accuracy {:.4} ({millis:.1} ms)",
            record.loss, record.accuracy
        );
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_agree_across_formats() {
        for v in Variant::ALL {
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{v}\""));
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }

    fn small(variant: Variant) -> FusionModel<f64> {
        let config = FusionConfig {
            variant,
            kernels: vec![(2, 3), (3, 2)],
            hidden: 3,
            attention: 2,
            num_classes: 2,
        };
        FusionModel::new(config, EmbeddingMatrix::init_gaussian(6, 4, 1), 1).unwrap()
    }

    #[test]
    fn fused_dim_matches_concatenation() {
        for v in Variant::ALL {
            let m = small(v);
            let x = m.embeddings.gather(&[1, 2, 3, 4]).unwrap();
            assert_eq!(fused_features(&m, &x).unwrap().len(), m.config.fused_dim());
        }
        assert_eq!(small(Variant::Full).config.fused_dim(), 5 + 4 * 3);
    }

    #[test]
    fn zero_output_weights_give_uniform_distribution() {
        let mut m = small(Variant::Full);
        m.w_out = Tensor::zeros(m.w_out.shape());
        let h = fuse_and_classify(&m, &[1, 2]).unwrap();
        assert_eq!(h.data(), &[0.5, 0.5]);
        assert!(fuse_and_classify(&m, &[]).is_err());
    }

    #[test]
    fn cnn_examples() {
        let x = Tensor::<f64>::from_f64(&[5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let zero = CnnChannelParams {
            kernels: vec![KernelGroup {
                width: 2,
                weights: Tensor::zeros(&[1, 2]),
                bias: Tensor::zeros(&[1]),
            }],
        };
        assert_eq!(cnn_channel(&x, &zero).unwrap().data(), &[0.0]);

        // Four windows with sums 3, 5, 7, 9; the last one wins.
        let p = CnnChannelParams {
            kernels: vec![KernelGroup {
                width: 2,
                weights: Tensor::from_f64(&[1, 2], &[0.1, 0.1]).unwrap(),
                bias: Tensor::zeros(&[1]),
            }],
        };
        assert_eq!(cnn_channel(&x, &p).unwrap().data(), &[0.9f64.tanh()]);
    }

    #[test]
    fn short_sentence_is_padded() {
        let x = Tensor::<f64>::from_f64(&[1, 1], &[2.0]).unwrap();
        let p = CnnChannelParams {
            kernels: vec![KernelGroup {
                width: 3,
                weights: Tensor::from_f64(&[1, 3], &[1.0, 1.0, 1.0]).unwrap(),
                bias: Tensor::zeros(&[1]),
            }],
        };
        assert_eq!(cnn_channel(&x, &p).unwrap().data(), &[2.0f64.tanh()]);
    }

    #[test]
    fn zero_sru_stays_at_rest() {
        let p = SruCellParams::<f64> {
            w: Tensor::zeros(&[2, 3]),
            w_f: Tensor::zeros(&[2, 3]),
            b_f: Tensor::zeros(&[2]),
            w_r: Tensor::zeros(&[2, 3]),
            b_r: Tensor::zeros(&[2]),
        };
        let x = Tensor::from_f64(&[4, 3], &[1.0; 12]).unwrap();
        let h = sru_forward(&x, &p).unwrap();
        assert_eq!(h.shape(), &[4, 2]);
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(sru_forward(&Tensor::<f64>::zeros(&[4, 2]), &p).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let h = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(max_pool_seq(&h).unwrap().data(), &[1.0, 1.0]);
        let one = Tensor::<f64>::from_f64(&[1, 2], &[3.0, -1.0]).unwrap();
        assert_eq!(max_pool_seq(&one).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let m = small(Variant::Full);
        let attn = m.attn.as_ref().unwrap();
        let h =
            Tensor::<f64>::from_f64(&[3, 6], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6].repeat(3)).unwrap();
        let alpha = attention_weights(&h, attn).unwrap();
        for &a in alpha.data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        let pooled = attention_pool(&h, attn).unwrap();
        for (a, b) in pooled.data().iter().zip(h.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("gru".parse::<Variant>().is_err());
    }

    #[test]
    fn state_covers_frozen_embeddings() {
        let mut m = small(Variant::CnnOnly);
        let trainable = m.state().len();
        m.embeddings.trainable = false;
        assert_eq!(m.state().len(), trainable);
        assert_eq!(m.params().len(), trainable - 1);
        assert_eq!(m.state_mut().len(), trainable);
    }
}
