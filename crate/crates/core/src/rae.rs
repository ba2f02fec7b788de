//! Semi-supervised recursive autoencoder.
//!
//! A sentence is encoded bottom-up by repeatedly merging two adjacent nodes
//! into a parent `F = f/‖f‖` with `f = tanh(W_g·[z1; z2] + b_g)`. Each parent
//! linearly reconstructs its children (`[z1'; z2'] = W_r·F + b_r`) and is
//! scored by the word-count weighted reconstruction error
//!
//! ```text
//! E_rec = n1/(n1+n2)·‖z1 − z1'‖² + n2/(n1+n2)·‖z2 − z2'‖²
//! ```
//!
//! and, when the sentence is labeled, by the cross-entropy of
//! `softmax(Eta·F)`. The per-node loss is `θ·E_rec + (1−θ)·E_ce`; the dataset
//! objective averages the per-sentence sums and adds `μ/2·‖δ‖²` over every
//! trainable parameter.
//!
//! Trees are induced greedily: at every step the adjacent pair with the
//! smallest reconstruction error is merged (leftmost on ties). Gradients
//! treat the induced tree as fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::numerics::{argmax, Graph, NodeId, Tensor, PROB_FLOOR};
use crate::optim::{
    grad_check, lbfgs_minimize, write_flat, FlatParams, GradCheckConfig, GradCheckReport,
    LbfgsConfig, LbfgsOutcome, ParamSet,
};
use crate::scalar::Scalar;
use crate::textdata::{LabeledCorpus, LabeledExample};

/// Below this pre-normalization norm a parent vector is left unnormalized.
pub const MIN_PARENT_NORM: f64 = 1e-12;

const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaeHyper {
    /// Weight of reconstruction against classification, in `[0, 1]`.
    pub theta: f64,
    /// L2 coefficient, `≥ 0`.
    pub mu: f64,
    pub num_classes: usize,
}

impl RaeHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidArgument(format!(
                "theta must lie in [0, 1], got {}",
                self.theta
            )));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mu must be non-negative, got {}",
                self.mu
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        Ok(())
    }
}

/// The full parameter set δ.
#[derive(Clone, Debug, PartialEq)]
pub struct RaeParams<T> {
    /// Composition weight `[n × 2n]`.
    pub w_g: Tensor<T>,
    pub b_g: Tensor<T>,
    /// Reconstruction weight `[2n × n]`.
    pub w_r: Tensor<T>,
    pub b_r: Tensor<T>,
    /// Classifier `[T × n]`.
    pub eta: Tensor<T>,
    pub embeddings: EmbeddingMatrix<T>,
    pub hyper: RaeHyper,
}

fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

impl<T: Scalar> RaeParams<T> {
    /// Glorot-uniform weights and zero biases around the given embeddings.
    pub fn new(embeddings: EmbeddingMatrix<T>, hyper: RaeHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let n = embeddings.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        Ok(Self {
            w_g: uniform(&[n, 2 * n], glorot(2 * n, n), &mut rng),
            b_g: Tensor::zeros(&[n]),
            w_r: uniform(&[2 * n, n], glorot(n, 2 * n), &mut rng),
            b_r: Tensor::zeros(&[2 * n]),
            eta: uniform(
                &[hyper.num_classes, n],
                glorot(n, hyper.num_classes),
                &mut rng,
            ),
            embeddings,
            hyper,
        })
    }

    /// Embedding dimension `n`.
    pub fn dim(&self) -> usize {
        self.b_g.len()
    }

    pub fn num_classes(&self) -> usize {
        self.hyper.num_classes
    }

    fn theta(&self) -> T {
        T::lit(self.hyper.theta)
    }

    /// Every tensor, frozen or not, for checkpointing.
    pub fn state(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("w_g", &self.w_g),
            ("b_g", &self.b_g),
            ("w_r", &self.w_r),
            ("b_r", &self.b_r),
            ("eta", &self.eta),
            ("embeddings", self.embeddings.matrix()),
        ]
    }

    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("w_g", &mut self.w_g),
            ("b_g", &mut self.b_g),
            ("w_r", &mut self.w_r),
            ("b_r", &mut self.b_r),
            ("eta", &mut self.eta),
            ("embeddings", self.embeddings.matrix_mut()),
        ]
    }
}

impl<T: Scalar> ParamSet<T> for RaeParams<T> {
    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["w_g", "b_g", "w_r", "b_r", "eta"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.embeddings.trainable {
            names.push("embeddings".into());
        }
        names
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.w_g, &self.b_g, &self.w_r, &self.b_r, &self.eta];
        if self.embeddings.trainable {
            out.push(self.embeddings.matrix());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let trainable = self.embeddings.trainable;
        let mut out = vec![
            &mut self.w_g,
            &mut self.b_g,
            &mut self.w_r,
            &mut self.b_r,
            &mut self.eta,
        ];
        if trainable {
            out.push(self.embeddings.matrix_mut());
        }
        out
    }
}

/// Parent vector of two children, unit-normalized unless degenerate.
pub fn compose_parent<T: Scalar>(
    z1: &Tensor<T>,
    z2: &Tensor<T>,
    p: &RaeParams<T>,
) -> Result<Tensor<T>> {
    let n = p.dim();
    if z1.len() != n || z2.len() != n {
        return Err(Error::dim("compose_parent", z1.shape(), z2.shape()));
    }
    let f = p
        .w_g
        .matmul(&Tensor::concat(&[z1, z2])?)?
        .add(&p.b_g)?
        .tanh();
    let norm = f.l2_norm();
    if norm.as_f64() < MIN_PARENT_NORM {
        Ok(f)
    } else {
        Ok(f.scale(T::one() / norm))
    }
}

/// Linear reconstruction of both children from a parent vector.
pub fn reconstruct<T: Scalar>(
    parent: &Tensor<T>,
    p: &RaeParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = p.dim();
    if parent.len() != n {
        return Err(Error::dim("reconstruct", parent.shape(), &[n]));
    }
    let z = p.w_r.matmul(parent)?.add(&p.b_r)?;
    Ok((z.slice(0, n)?, z.slice(n, n)?))
}

/// Word-count weighted reconstruction error of a merge.
pub fn weighted_rec_error<T: Scalar>(
    z1: &Tensor<T>,
    z2: &Tensor<T>,
    z1_rec: &Tensor<T>,
    z2_rec: &Tensor<T>,
    n1: usize,
    n2: usize,
) -> Result<T> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidArgument(
            "word counts must be positive".into(),
        ));
    }
    let total = T::from_usize_lossy(n1 + n2);
    let w1 = T::from_usize_lossy(n1) / total;
    let w2 = T::from_usize_lossy(n2) / total;
    Ok(w1 * z1.sub(z1_rec)?.l2_norm_sq() + w2 * z2.sub(z2_rec)?.l2_norm_sq())
}

/// `½‖Z − Z'‖²`, the unweighted reconstruction error.
pub fn unweighted_rec_error<T: Scalar>(z: &Tensor<T>, z_rec: &Tensor<T>) -> Result<T> {
    Ok(T::lit(0.5) * z.sub(z_rec)?.l2_norm_sq())
}

/// `softmax(Eta·F)`.
pub fn classify_node<T: Scalar>(vector: &Tensor<T>, p: &RaeParams<T>) -> Result<Tensor<T>> {
    p.eta.matmul(vector)?.softmax()
}

/// `−ln h[label]`, with `h` clamped below at 1e-15.
pub fn cross_entropy_loss<T: Scalar>(h: &Tensor<T>, label: usize) -> Result<T> {
    let p = *h
        .data()
        .get(label)
        .ok_or_else(|| Error::dim("cross_entropy_loss", h.shape(), &[label]))?;
    Ok(-p.max(T::lit(PROB_FLOOR)).ln())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaeNode<T> {
    pub vector: Tensor<T>,
    pub word_count: usize,
    /// Arena indices of the two children; `None` for leaves.
    pub children: Option<(usize, usize)>,
    /// Weighted reconstruction error (zero for leaves).
    pub rec_error: T,
    /// Class distribution (internal nodes only).
    pub class_dist: Option<Tensor<T>>,
}

impl<T> RaeNode<T> {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Sequence of merges, each naming two arena indices. Leaves occupy indices
/// `0..m` and merge `k` creates index `m + k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeShape {
    pub leaves: usize,
    pub merges: Vec<(usize, usize)>,
}

/// Binary tree over a sentence, stored as an arena with leaves first.
#[derive(Clone, Debug, PartialEq)]
pub struct RaeTree<T> {
    pub nodes: Vec<RaeNode<T>>,
    /// Sentence length `m`.
    pub len: usize,
}

impl<T: Scalar> RaeTree<T> {
    pub fn root(&self) -> &RaeNode<T> {
        self.nodes.last().expect("tree has at least one leaf")
    }

    pub fn leaves(&self) -> &[RaeNode<T>] {
        &self.nodes[..self.len]
    }

    pub fn internal(&self) -> &[RaeNode<T>] {
        &self.nodes[self.len..]
    }

    pub fn shape(&self) -> TreeShape {
        TreeShape {
            leaves: self.len,
            merges: self.internal().iter().filter_map(|n| n.children).collect(),
        }
    }

    pub fn total_rec_error(&self) -> T {
        self.internal().iter().map(|n| n.rec_error).sum()
    }

    /// Parenthesized rendering, e.g. `((the movie) rocks)`.
    pub fn render<S: AsRef<str>>(&self, words: &[S]) -> String {
        fn go<T, S: AsRef<str>>(nodes: &[RaeNode<T>], i: usize, words: &[S], out: &mut String) {
            match nodes[i].children {
                None => out.push_str(words.get(i).map(AsRef::as_ref).unwrap_or("?")),
                Some((l, r)) => {
                    out.push('(');
                    go(nodes, l, words, out);
                    out.push(' ');
                    go(nodes, r, words, out);
                    out.push(')');
                }
            }
        }
        let mut out = String::new();
        go(&self.nodes, self.nodes.len() - 1, words, &mut out);
        out
    }
}

struct Merge<T> {
    parent: Tensor<T>,
    rec_error: T,
}

fn evaluate_merge<T: Scalar>(a: &RaeNode<T>, b: &RaeNode<T>, p: &RaeParams<T>) -> Result<Merge<T>> {
    let parent = compose_parent(&a.vector, &b.vector, p)?;
    let (ra, rb) = reconstruct(&parent, p)?;
    let rec_error = weighted_rec_error(&a.vector, &b.vector, &ra, &rb, a.word_count, b.word_count)?;
    Ok(Merge { parent, rec_error })
}

fn leaf_nodes<T: Scalar>(leaves: &[Tensor<T>], n: usize) -> Result<Vec<RaeNode<T>>> {
    if leaves.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a tree over an empty sentence".into(),
        ));
    }
    leaves
        .iter()
        .map(|v| {
            if v.len() != n {
                return Err(Error::dim("leaf", v.shape(), &[n]));
            }
            Ok(RaeNode {
                vector: v.clone(),
                word_count: 1,
                children: None,
                rec_error: T::zero(),
                class_dist: None,
            })
        })
        .collect()
}

fn push_internal<T: Scalar>(
    nodes: &mut Vec<RaeNode<T>>,
    left: usize,
    right: usize,
    merge: Merge<T>,
    p: &RaeParams<T>,
) -> Result<usize> {
    let class_dist = Some(classify_node(&merge.parent, p)?);
    let word_count = nodes[left].word_count + nodes[right].word_count;
    nodes.push(RaeNode {
        vector: merge.parent,
        word_count,
        children: Some((left, right)),
        rec_error: merge.rec_error,
        class_dist,
    });
    Ok(nodes.len() - 1)
}

/// Greedy tree induction: merge the adjacent pair with minimal weighted
/// reconstruction error until one root remains; ties go to the leftmost pair.
pub fn greedy_build_tree<T: Scalar>(leaves: &[Tensor<T>], p: &RaeParams<T>) -> Result<RaeTree<T>> {
    let mut nodes = leaf_nodes(leaves, p.dim())?;
    let mut frontier: Vec<usize> = (0..nodes.len()).collect();
    let mut candidates: Vec<Merge<T>> = frontier
        .windows(2)
        .map(|w| evaluate_merge(&nodes[w[0]], &nodes[w[1]], p))
        .collect::<Result<_>>()?;

    while frontier.len() > 1 {
        let mut best = 0;
        for (i, c) in candidates.iter().enumerate().skip(1) {
            if c.rec_error < candidates[best].rec_error {
                best = i;
            }
        }
        let merge = candidates.remove(best);
        let (left, right) = (frontier[best], frontier[best + 1]);
        let id = push_internal(&mut nodes, left, right, merge, p)?;
        frontier[best] = id;
        frontier.remove(best + 1);
        if best > 0 {
            candidates[best - 1] = evaluate_merge(&nodes[frontier[best - 1]], &nodes[id], p)?;
        }
        if best + 1 < frontier.len() {
            candidates[best] = evaluate_merge(&nodes[id], &nodes[frontier[best + 1]], p)?;
        }
    }
    Ok(RaeTree {
        len: leaves.len(),
        nodes,
    })
}

/// Evaluates a given tree structure under `p`.
pub fn build_with_shape<T: Scalar>(
    leaves: &[Tensor<T>],
    shape: &TreeShape,
    p: &RaeParams<T>,
) -> Result<RaeTree<T>> {
    let mut nodes = leaf_nodes(leaves, p.dim())?;
    if shape.leaves != leaves.len() || shape.merges.len() + 1 != leaves.len() {
        return Err(Error::InvalidArgument(format!(
            "tree shape for {} leaves does not fit a sentence of {}",
            shape.leaves,
            leaves.len()
        )));
    }
    for &(l, r) in &shape.merges {
        if l >= nodes.len() || r >= nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "merge ({l}, {r}) references a future node"
            )));
        }
        let merge = evaluate_merge(&nodes[l], &nodes[r], p)?;
        push_internal(&mut nodes, l, r, merge, p)?;
    }
    Ok(RaeTree {
        len: leaves.len(),
        nodes,
    })
}

/// Leaf vectors of a token sequence.
pub fn sentence_leaves<T: Scalar>(tokens: &[usize], p: &RaeParams<T>) -> Result<Vec<Tensor<T>>> {
    tokens.iter().map(|&t| p.embeddings.column(t)).collect()
}

/// `θ·E_rec + (1−θ)·E_ce` for an internal node; `label = None` drops `E_ce`.
pub fn node_loss<T: Scalar>(
    node: &RaeNode<T>,
    label: Option<usize>,
    p: &RaeParams<T>,
) -> Result<T> {
    let Some(h) = &node.class_dist else {
        return Err(Error::InvalidArgument(
            "node_loss needs an internal node".into(),
        ));
    };
    let theta = p.theta();
    let ce = match label {
        Some(l) => cross_entropy_loss(h, l)?,
        None => T::zero(),
    };
    Ok(theta * node.rec_error + (T::one() - theta) * ce)
}

pub fn tree_loss<T: Scalar>(
    tree: &RaeTree<T>,
    label: Option<usize>,
    p: &RaeParams<T>,
) -> Result<T> {
    tree.internal().iter().map(|n| node_loss(n, label, p)).sum()
}

fn example_label(e: &LabeledExample) -> Option<usize> {
    e.labeled.then_some(e.label)
}

/// Sum of node losses over the greedy tree of a sentence.
pub fn sentence_loss<T: Scalar>(
    tokens: &[usize],
    label: Option<usize>,
    p: &RaeParams<T>,
) -> Result<T> {
    let tree = greedy_build_tree(&sentence_leaves(tokens, p)?, p)?;
    tree_loss(&tree, label, p)
}

fn regularizer<T: Scalar>(p: &RaeParams<T>) -> T {
    let sq: T = p.params().iter().map(|t| t.l2_norm_sq()).sum();
    T::lit(p.hyper.mu * 0.5) * sq
}

fn check_corpus(corpus: &LabeledCorpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "objective over an empty corpus".into(),
        ));
    }
    Ok(())
}

/// `(1/N)·Σ W(u, t) + μ/2·‖δ‖²` with greedily induced trees.
pub fn dataset_objective<T: Scalar>(corpus: &LabeledCorpus, p: &RaeParams<T>) -> Result<T> {
    check_corpus(corpus)?;
    let losses: Vec<T> = corpus
        .examples
        .par_iter()
        .map(|e| sentence_loss(&e.tokens, example_label(e), p))
        .collect::<Result<_>>()?;
    let mean = losses.into_iter().sum::<T>() / T::from_usize_lossy(corpus.len());
    Ok(mean + regularizer(p))
}

/// Greedy tree shapes of every example under `p`.
pub fn induce_shapes<T: Scalar>(
    corpus: &LabeledCorpus,
    p: &RaeParams<T>,
) -> Result<Vec<TreeShape>> {
    corpus
        .examples
        .par_iter()
        .map(|e| Ok(greedy_build_tree(&sentence_leaves(&e.tokens, p)?, p)?.shape()))
        .collect()
}

/// Objective with the tree structures held fixed.
pub fn dataset_objective_fixed<T: Scalar>(
    corpus: &LabeledCorpus,
    p: &RaeParams<T>,
    shapes: &[TreeShape],
) -> Result<T> {
    check_corpus(corpus)?;
    if shapes.len() != corpus.len() {
        return Err(Error::dim(
            "dataset_objective_fixed",
            &[corpus.len()],
            &[shapes.len()],
        ));
    }
    let losses: Vec<T> = corpus
        .examples
        .par_iter()
        .zip(shapes)
        .map(|(e, s)| {
            let tree = build_with_shape(&sentence_leaves(&e.tokens, p)?, s, p)?;
            tree_loss(&tree, example_label(e), p)
        })
        .collect::<Result<_>>()?;
    let mean = losses.into_iter().sum::<T>() / T::from_usize_lossy(corpus.len());
    Ok(mean + regularizer(p))
}

/// Records one sentence's loss over a fixed tree and back-propagates it,
/// adding parameter gradients into `grad` (manifest layout).
fn accumulate_sentence<T: Scalar>(
    e: &LabeledExample,
    shape: &TreeShape,
    p: &RaeParams<T>,
    offsets: &[usize],
    grad: &mut [T],
) -> Result<T> {
    if shape.merges.is_empty() {
        return Ok(T::zero());
    }
    let n = p.dim();
    let theta = p.theta();
    let label = example_label(e);
    let mut g = Graph::new();
    let w_g = g.param(&p.w_g);
    let b_g = g.param(&p.b_g);
    let w_r = g.param(&p.w_r);
    let b_r = g.param(&p.b_r);
    let eta = g.param(&p.eta);
    let x = g.input(p.embeddings.gather(&e.tokens)?);

    let mut ids: Vec<NodeId> = (0..e.tokens.len())
        .map(|i| g.row(x, i))
        .collect::<Result<_>>()?;
    let mut counts = vec![1usize; e.tokens.len()];
    let mut losses = Vec::with_capacity(shape.merges.len());
    for &(l, r) in &shape.merges {
        let z = g.concat(&[ids[l], ids[r]])?;
        let pre = g.matmul(w_g, z)?;
        let pre = g.add(pre, b_g)?;
        let f = g.tanh(pre);
        let parent = g.normalize(f, T::lit(MIN_PARENT_NORM));

        let rec = g.matmul(w_r, parent)?;
        let rec = g.add(rec, b_r)?;
        let r1 = g.slice(rec, 0, n)?;
        let r2 = g.slice(rec, n, n)?;
        let d1 = g.sub(ids[l], r1)?;
        let d2 = g.sub(ids[r], r2)?;
        let e1 = g.l2_norm_sq(d1);
        let e2 = g.l2_norm_sq(d2);
        let total = T::from_usize_lossy(counts[l] + counts[r]);
        let e1 = g.scale(e1, theta * T::from_usize_lossy(counts[l]) / total);
        let e2 = g.scale(e2, theta * T::from_usize_lossy(counts[r]) / total);
        losses.push(e1);
        losses.push(e2);

        if let Some(label) = label {
            let logits = g.matmul(eta, parent)?;
            let h = g.softmax(logits)?;
            let ce = g.cross_entropy(h, label)?;
            losses.push(g.scale(ce, T::one() - theta));
        }
        ids.push(parent);
        counts.push(counts[l] + counts[r]);
    }
    let all = g.concat(&losses)?;
    let loss = g.sum(all);
    g.backward(loss)?;

    for (k, id) in [w_g, b_g, w_r, b_r, eta].into_iter().enumerate() {
        let gd = g.grad(id).expect("leaf gradient").data();
        for (o, &v) in grad[offsets[k]..offsets[k] + gd.len()].iter_mut().zip(gd) {
            *o += v;
        }
    }
    if p.embeddings.trainable {
        let gx = g.grad(x).expect("leaf gradient").data();
        p.embeddings
            .scatter_grad(&e.tokens, gx, &mut grad[offsets[5]..]);
    }
    Ok(g.value(loss).item())
}

/// Objective value and its gradient with respect to every trainable
/// parameter, through the given fixed tree structures.
pub fn objective_gradient_fixed<T: Scalar>(
    corpus: &LabeledCorpus,
    p: &RaeParams<T>,
    shapes: &[TreeShape],
) -> Result<(T, Vec<T>)> {
    check_corpus(corpus)?;
    if shapes.len() != corpus.len() {
        return Err(Error::dim(
            "objective_gradient_fixed",
            &[corpus.len()],
            &[shapes.len()],
        ));
    }
    let manifest = p.manifest();
    let offsets: Vec<usize> = manifest.iter().map(|s| s.offset).collect();
    let total = p.num_params();

    // Fixed-size chunks summed in order keep the result independent of the
    // thread count.
    let partials: Vec<(T, Vec<T>)> = corpus
        .examples
        .par_chunks(CHUNK)
        .zip(shapes.par_chunks(CHUNK))
        .map(|(examples, shapes)| {
            let mut grad = vec![T::zero(); total];
            let mut loss = T::zero();
            for (e, s) in examples.iter().zip(shapes) {
                loss += accumulate_sentence(e, s, p, &offsets, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect::<Result<_>>()?;

    let inv_n = T::one() / T::from_usize_lossy(corpus.len());
    let mut grad = vec![T::zero(); total];
    let mut loss = T::zero();
    for (l, g) in partials {
        loss += l;
        for (o, v) in grad.iter_mut().zip(g) {
            *o += v;
        }
    }
    let mu = T::lit(p.hyper.mu);
    let mut offset = 0;
    for t in p.params() {
        for (o, &v) in grad[offset..offset + t.len()].iter_mut().zip(t.data()) {
            *o = *o * inv_n + mu * v;
        }
        offset += t.len();
    }
    Ok((loss * inv_n + regularizer(p), grad))
}

/// Objective and gradient, inducing trees greedily under the current `p`.
pub fn objective_gradient<T: Scalar>(
    corpus: &LabeledCorpus,
    p: &RaeParams<T>,
) -> Result<(T, Vec<T>)> {
    let shapes = induce_shapes(corpus, p)?;
    objective_gradient_fixed(corpus, p, &shapes)
}

/// Compares tape gradients against central differences of the directly
/// evaluated objective, with tree structures frozen at their greedy shape
/// under `p`.
pub fn check_gradient<T: Scalar>(
    corpus: &LabeledCorpus,
    p: &RaeParams<T>,
    samples: usize,
    seed: u64,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let shapes = induce_shapes(corpus, p)?;
    let start = FlatParams::from_model(p);
    let manifest = start.manifest.clone();
    let mut scratch = p.clone();
    let mut first = true;
    grad_check(
        |x: &[T]| {
            write_flat(x, &manifest, &mut scratch)?;
            if std::mem::take(&mut first) {
                objective_gradient_fixed(corpus, &scratch, &shapes)
            } else {
                Ok((
                    dataset_objective_fixed(corpus, &scratch, &shapes)?,
                    Vec::new(),
                ))
            }
        },
        &start.values,
        samples,
        seed,
        config,
        Some(&manifest),
    )
}

/// Class distribution at the root; a single word is classified directly.
pub fn sentence_distribution<T: Scalar>(tokens: &[usize], p: &RaeParams<T>) -> Result<Tensor<T>> {
    let tree = greedy_build_tree(&sentence_leaves(tokens, p)?, p)?;
    let root = tree.root();
    match &root.class_dist {
        Some(h) => Ok(h.clone()),
        None => classify_node(&root.vector, p),
    }
}

/// Argmax of the root class distribution; ties go to the lowest class.
pub fn predict_sentence<T: Scalar>(tokens: &[usize], p: &RaeParams<T>) -> Result<usize> {
    Ok(argmax(sentence_distribution(tokens, p)?.data()))
}

pub fn accuracy<T: Scalar>(corpus: &LabeledCorpus, p: &RaeParams<T>) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "accuracy over an empty corpus".into(),
        ));
    }
    let predictions: Vec<usize> = corpus
        .examples
        .par_iter()
        .map(|e| predict_sentence(&e.tokens, p))
        .collect::<Result<_>>()?;
    let correct = predictions
        .iter()
        .zip(&corpus.examples)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(correct as f64 / corpus.len() as f64)
}

/// Fits `p` to `corpus` with L-BFGS, re-inducing trees at every evaluation.
pub fn train_lbfgs<T: Scalar>(
    p: &mut RaeParams<T>,
    corpus: &LabeledCorpus,
    config: &LbfgsConfig,
) -> Result<LbfgsOutcome<T>> {
    let start = FlatParams::from_model(p);
    let manifest = start.manifest.clone();
    let mut scratch = p.clone();
    let outcome = lbfgs_minimize(
        |x: &[T]| {
            write_flat(x, &manifest, &mut scratch)?;
            objective_gradient(corpus, &scratch)
        },
        start.values,
        config,
    )?;
    write_flat(&outcome.x, &manifest, p)?;
    Ok(outcome)
}
