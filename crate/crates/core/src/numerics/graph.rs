use std::borrow::Cow;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    MatMulTn(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddRowBias(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    L2NormSq(NodeId),
    Concat(Vec<NodeId>),
    Slice {
        src: NodeId,
        start: usize,
    },
    Row {
        src: NodeId,
        row: usize,
    },
    StackRows(Vec<NodeId>),
    HCat(NodeId, NodeId),
    ReverseRows(NodeId),
    Unfold {
        src: NodeId,
        width: usize,
    },
    MaxRows {
        src: NodeId,
        winners: Vec<usize>,
    },
    Normalize {
        src: NodeId,
        norm: Option<T>,
    },
    CrossEntropy {
        probs: NodeId,
        label: usize,
        clamped: bool,
    },
    SruScan {
        xt: NodeId,
        forget: NodeId,
        reset: NodeId,
        cells: Vec<T>,
    },
    LstmScan {
        gates: NodeId,
        recur: NodeId,
        cache: LstmCache<T>,
    },
}

#[derive(Debug)]
struct LstmCache<T> {
    /// Post-activation gates per step, laid out `[i | f | g | o]`.
    acts: Vec<T>,
    cells: Vec<T>,
}

#[derive(Debug)]
struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
}

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-15;

/// Record of executed operations for reverse-mode differentiation.
///
/// Parameters are borrowed for the lifetime `'p`, so building a graph per
/// example costs no parameter copies. [`Graph::backward`] replays adjoints in
/// exact reverse recording order; afterwards every leaf holds a gradient
/// (zero when it did not influence the loss).
#[derive(Debug)]
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.push(Cow::Owned(value), op)
    }

    /// Borrowed leaf, typically a model parameter.
    pub fn param(&mut self, tensor: &'p Tensor<T>) -> NodeId {
        self.push(Cow::Borrowed(tensor), Op::Leaf)
    }

    /// Owned leaf, typically an input.
    pub fn input(&mut self, tensor: Tensor<T>) -> NodeId {
        self.owned(tensor, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.owned(out, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ -> [m×n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.cols() {
            return Err(Error::dim("matmul_nt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![T::zero(); m * n];
        matmul_nt_into(av.data(), bv.data(), &mut out, m, k, n);
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.owned(out, Op::MatMulNt(a, b)))
    }

    /// `a[m×k]ᵀ · b[m×n] -> [k×n]`, or `a[m×k]ᵀ · b[m] -> [k]`.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || bv.ndim() > 2 || av.rows() != bv.rows() {
            return Err(Error::dim("matmul_tn", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::zero(); k * n];
        matmul_tn_into(av.data(), bv.data(), &mut out, m, k, n);
        let shape: &[usize] = if bv.is_vector() { &[k] } else { &[k, n] };
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.owned(out, Op::MatMulTn(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.owned(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.owned(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.owned(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let out = self.value(a).scale(factor);
        self.owned(out, Op::Scale(a, factor))
    }

    /// Adds vector `bias[c]` to every row of `m[r×c]`.
    pub fn add_row_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        let (mv, bv) = (self.value(m), self.value(bias));
        if !mv.is_matrix() || !bv.is_vector() || mv.cols() != bv.len() {
            return Err(Error::dim("add_row_bias", mv.shape(), bv.shape()));
        }
        let c = mv.cols();
        let mut out = mv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.owned(out, Op::AddRowBias(m, bias)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).tanh();
        self.owned(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).sigmoid();
        self.owned(out, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).softmax()?;
        Ok(self.owned(out, Op::Softmax(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        self.owned(out, Op::Sum(a))
    }

    pub fn l2_norm_sq(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).l2_norm_sq());
        self.owned(out, Op::L2NormSq(a))
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values)?;
        Ok(self.owned(out, Op::Concat(parts.to_vec())))
    }

    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let out = self.value(src).slice(start, len)?;
        Ok(self.owned(out, Op::Slice { src, start }))
    }

    pub fn row(&mut self, src: NodeId, row: usize) -> Result<NodeId> {
        let v = self.value(src);
        if !v.is_matrix() || row >= v.rows() {
            return Err(Error::dim("row", v.shape(), &[row]));
        }
        let out = Tensor::vector(v.row(row).to_vec());
        Ok(self.owned(out, Op::Row { src, row }))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack_rows of nothing".into()))?;
        let width = self.value(*first).len();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let v = self.value(r);
            if v.len() != width {
                return Err(Error::dim("stack_rows", &[width], v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(&[rows.len(), width], data)?;
        Ok(self.owned(out, Op::StackRows(rows.to_vec())))
    }

    /// `[m×p] ++ [m×q] -> [m×(p+q)]`, row by row.
    pub fn hcat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.rows() != bv.rows() {
            return Err(Error::dim("hcat", av.shape(), bv.shape()));
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let out = Tensor::from_vec(&[m, p + q], data)?;
        Ok(self.owned(out, Op::HCat(a, b)))
    }

    pub fn reverse_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if !v.is_matrix() {
            return Err(Error::dim("reverse_rows", v.shape(), &[]));
        }
        let mut data = Vec::with_capacity(v.len());
        for i in (0..v.rows()).rev() {
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::from_vec(v.shape(), data)?;
        Ok(self.owned(out, Op::ReverseRows(a)))
    }

    /// Sliding windows of `width` consecutive rows, each flattened into one
    /// output row: `[m×n] -> [(m'-width+1) × width·n]` where
    /// `m' = max(m, width, pad_to)` and rows past `m` are zero.
    pub fn unfold(&mut self, src: NodeId, width: usize, pad_to: usize) -> Result<NodeId> {
        let v = self.value(src);
        if !v.is_matrix() || width == 0 {
            return Err(Error::dim("unfold", v.shape(), &[width]));
        }
        let (m, n) = (v.rows(), v.cols());
        let positions = m.max(width).max(pad_to) - width + 1;
        let mut data = vec![T::zero(); positions * width * n];
        for p in 0..positions {
            for j in 0..width {
                if p + j < m {
                    let dst = p * width * n + j * n;
                    data[dst..dst + n].copy_from_slice(v.row(p + j));
                }
            }
        }
        let out = Tensor::from_vec(&[positions, width * n], data)?;
        Ok(self.owned(out, Op::Unfold { src, width }))
    }

    /// Column-wise maximum over rows: `[m×c] -> [c]`. Ties go to the first row.
    pub fn max_rows(&mut self, src: NodeId) -> Result<NodeId> {
        let v = self.value(src);
        if !v.is_matrix() {
            return Err(Error::dim("max_rows", v.shape(), &[]));
        }
        let (m, c) = (v.rows(), v.cols());
        let mut winners = vec![0usize; c];
        let mut best = v.row(0).to_vec();
        for i in 1..m {
            for (j, &x) in v.row(i).iter().enumerate() {
                if x > best[j] {
                    best[j] = x;
                    winners[j] = i;
                }
            }
        }
        Ok(self.owned(Tensor::vector(best), Op::MaxRows { src, winners }))
    }

    /// `x / ‖x‖`, passing `x` through unchanged when `‖x‖ < min_norm`.
    pub fn normalize(&mut self, src: NodeId, min_norm: T) -> NodeId {
        let v = self.value(src);
        let norm = v.l2_norm();
        if norm < min_norm {
            let out = v.clone();
            self.owned(out, Op::Normalize { src, norm: None })
        } else {
            let out = v.scale(T::one() / norm);
            self.owned(
                out,
                Op::Normalize {
                    src,
                    norm: Some(norm),
                },
            )
        }
    }

    /// `-ln(max(p[label], 1e-15))` for a probability vector `p`.
    pub fn cross_entropy(&mut self, probs: NodeId, label: usize) -> Result<NodeId> {
        let v = self.value(probs);
        if label >= v.len() {
            return Err(Error::dim("cross_entropy", v.shape(), &[label]));
        }
        let p = v.data()[label];
        let floor = T::lit(PROB_FLOOR);
        let clamped = p < floor;
        let loss = -(if clamped { floor } else { p }).ln();
        Ok(self.owned(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                label,
                clamped,
            },
        ))
    }

    /// Elementwise simple-recurrent-unit scan over `m` steps with zero initial
    /// state. Inputs are `[m×d]`: the transformed input `x̃`, and the already
    /// squashed forget and reset gates.
    ///
    /// `c_t = f_t ⊙ c_{t-1} + (1 - f_t) ⊙ x̃_t`, `h_t = r_t ⊙ tanh(c_t)`.
    pub fn sru_scan(&mut self, xt: NodeId, forget: NodeId, reset: NodeId) -> Result<NodeId> {
        let (xv, fv, rv) = (self.value(xt), self.value(forget), self.value(reset));
        if !xv.is_matrix() || xv.shape() != fv.shape() || xv.shape() != rv.shape() {
            return Err(Error::dim("sru_scan", xv.shape(), fv.shape()));
        }
        let (m, d) = (xv.rows(), xv.cols());
        let mut cells = vec![T::zero(); m * d];
        let mut hidden = vec![T::zero(); m * d];
        for t in 0..m {
            for j in 0..d {
                let i = t * d + j;
                let prev = if t == 0 { T::zero() } else { cells[i - d] };
                let f = fv.data()[i];
                let c = f * prev + (T::one() - f) * xv.data()[i];
                cells[i] = c;
                hidden[i] = rv.data()[i] * c.tanh();
            }
        }
        let out = Tensor::from_vec(&[m, d], hidden)?;
        Ok(self.owned(
            out,
            Op::SruScan {
                xt,
                forget,
                reset,
                cells,
            },
        ))
    }

    /// LSTM scan with zero initial state. `gates` is `[m×4d]` holding the
    /// input projection plus bias in `[i | f | g | o]` order; `recur` is the
    /// `[4d×d]` hidden-to-hidden matrix.
    pub fn lstm_scan(&mut self, gates: NodeId, recur: NodeId) -> Result<NodeId> {
        let (gv, uv) = (self.value(gates), self.value(recur));
        if !gv.is_matrix()
            || !uv.is_matrix()
            || gv.cols() != uv.rows()
            || uv.rows() != 4 * uv.cols()
        {
            return Err(Error::dim("lstm_scan", gv.shape(), uv.shape()));
        }
        let (m, d) = (gv.rows(), uv.cols());
        let mut acts = vec![T::zero(); m * 4 * d];
        let mut cells = vec![T::zero(); m * d];
        let mut hidden = vec![T::zero(); m * d];
        let mut pre = vec![T::zero(); 4 * d];
        for t in 0..m {
            pre.copy_from_slice(gv.row(t));
            if t > 0 {
                let h_prev = &hidden[(t - 1) * d..t * d];
                matmul_into(uv.data(), h_prev, &mut pre, 4 * d, d, 1);
            }
            let a = &mut acts[t * 4 * d..(t + 1) * 4 * d];
            for j in 0..d {
                a[j] = sigmoid(pre[j]);
                a[d + j] = sigmoid(pre[d + j]);
                a[2 * d + j] = pre[2 * d + j].tanh();
                a[3 * d + j] = sigmoid(pre[3 * d + j]);
            }
            for j in 0..d {
                let prev = if t == 0 {
                    T::zero()
                } else {
                    cells[(t - 1) * d + j]
                };
                let c = a[d + j] * prev + a[j] * a[2 * d + j];
                cells[t * d + j] = c;
                hidden[t * d + j] = a[3 * d + j] * c.tanh();
            }
        }
        let out = Tensor::from_vec(&[m, d], hidden)?;
        Ok(self.owned(
            out,
            Op::LstmScan {
                gates,
                recur,
                cache: LstmCache { acts, cells },
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }

        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) {
        let gd = g.data();
        // Ops only reference earlier nodes, so the tail borrow is split off.
        let (before, rest) = self.nodes.split_at(i);
        let node = &rest[0];
        let out = node.value.as_ref();
        let val = |id: NodeId| -> &Tensor<T> { &before[id.0].value };
        let grads = &mut self.grads;
        macro_rules! acc {
            ($id:expr) => {
                slot(grads, before, $id)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                matmul_nt_into(gd, bv.data(), acc!(*a), m, n, k);
                matmul_tn_into(av.data(), gd, acc!(*b), m, k, n);
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                matmul_into(gd, bv.data(), acc!(*a), m, n, k);
                matmul_tn_into(gd, av.data(), acc!(*b), m, n, k);
            }
            Op::MatMulTn(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                matmul_nt_into(bv.data(), gd, acc!(*a), m, n, k);
                matmul_into(av.data(), gd, acc!(*b), m, k, n);
            }
            Op::Add(a, b) => {
                axpy(acc!(*a), gd, T::one());
                axpy(acc!(*b), gd, T::one());
            }
            Op::Sub(a, b) => {
                axpy(acc!(*a), gd, T::one());
                axpy(acc!(*b), gd, -T::one());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                for ((o, &gv), &y) in acc!(*a).iter_mut().zip(gd).zip(bv) {
                    *o += gv * y;
                }
                for ((o, &gv), &x) in acc!(*b).iter_mut().zip(gd).zip(av) {
                    *o += gv * x;
                }
            }
            Op::Scale(a, c) => axpy(acc!(*a), gd, *c),
            Op::AddRowBias(m, b) => {
                axpy(acc!(*m), gd, T::one());
                let c = val(*b).len();
                let gb = acc!(*b);
                for row in gd.chunks(c) {
                    axpy(gb, row, T::one());
                }
            }
            Op::Tanh(a) => {
                for ((o, &gv), &y) in acc!(*a).iter_mut().zip(gd).zip(out.data()) {
                    *o += gv * (T::one() - y * y);
                }
            }
            Op::Sigmoid(a) => {
                for ((o, &gv), &y) in acc!(*a).iter_mut().zip(gd).zip(out.data()) {
                    *o += gv * y * (T::one() - y);
                }
            }
            Op::Softmax(a) => {
                let y = out.data();
                let inner: T = gd.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
                for ((o, &gv), &yv) in acc!(*a).iter_mut().zip(gd).zip(y) {
                    *o += yv * (gv - inner);
                }
            }
            Op::Sum(a) => {
                for o in acc!(*a).iter_mut() {
                    *o += gd[0];
                }
            }
            Op::L2NormSq(a) => {
                let two_g = gd[0] + gd[0];
                let av = val(*a).data();
                for (o, &x) in acc!(*a).iter_mut().zip(av) {
                    *o += two_g * x;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    axpy(acc!(p), &gd[offset..offset + len], T::one());
                    offset += len;
                }
            }
            Op::Slice { src, start } => {
                let ga = acc!(*src);
                axpy(&mut ga[*start..*start + gd.len()], gd, T::one());
            }
            Op::Row { src, row } => {
                let c = val(*src).cols();
                let ga = acc!(*src);
                axpy(&mut ga[row * c..(row + 1) * c], gd, T::one());
            }
            Op::StackRows(rows) => {
                let width = out.cols();
                for (r, &id) in rows.iter().enumerate() {
                    axpy(acc!(id), &gd[r * width..(r + 1) * width], T::one());
                }
            }
            Op::HCat(a, b) => {
                let (p, q) = (val(*a).cols(), val(*b).cols());
                for (r, row) in gd.chunks(p + q).enumerate() {
                    axpy(&mut acc!(*a)[r * p..(r + 1) * p], &row[..p], T::one());
                    axpy(&mut acc!(*b)[r * q..(r + 1) * q], &row[p..], T::one());
                }
            }
            Op::ReverseRows(a) => {
                let (m, c) = (out.rows(), out.cols());
                let ga = acc!(*a);
                for r in 0..m {
                    let src = m - 1 - r;
                    axpy(
                        &mut ga[src * c..(src + 1) * c],
                        &gd[r * c..(r + 1) * c],
                        T::one(),
                    );
                }
            }
            Op::Unfold { src, width } => {
                let sv = val(*src);
                let (m, n) = (sv.rows(), sv.cols());
                let positions = out.rows();
                let ga = acc!(*src);
                for p in 0..positions {
                    for j in 0..*width {
                        if p + j < m {
                            let from = p * width * n + j * n;
                            let to = (p + j) * n;
                            axpy(&mut ga[to..to + n], &gd[from..from + n], T::one());
                        }
                    }
                }
            }
            Op::MaxRows { src, winners } => {
                let c = out.len();
                let ga = acc!(*src);
                for (j, &w) in winners.iter().enumerate() {
                    ga[w * c + j] += gd[j];
                }
            }
            Op::Normalize { src, norm } => match norm {
                None => axpy(acc!(*src), gd, T::one()),
                Some(norm) => {
                    let y = out.data();
                    let proj: T = y.iter().zip(gd).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in acc!(*src).iter_mut().zip(gd).zip(y) {
                        *o += (gv - yv * proj) / *norm;
                    }
                }
            },
            Op::CrossEntropy {
                probs,
                label,
                clamped,
            } => {
                if !clamped {
                    let p = val(*probs).data()[*label];
                    acc!(*probs)[*label] -= gd[0] / p;
                }
            }
            Op::SruScan {
                xt,
                forget,
                reset,
                cells,
            } => {
                let (xv, fv, rv) = (val(*xt).data(), val(*forget).data(), val(*reset).data());
                let (m, d) = (out.rows(), out.cols());
                let mut dxt = vec![T::zero(); m * d];
                let mut df = vec![T::zero(); m * d];
                let mut dr = vec![T::zero(); m * d];
                let mut dc_next = vec![T::zero(); d];
                for t in (0..m).rev() {
                    for j in 0..d {
                        let i = t * d + j;
                        let tc = cells[i].tanh();
                        let dh = gd[i];
                        dr[i] = dh * tc;
                        let dc = dc_next[j] + dh * rv[i] * (T::one() - tc * tc);
                        let prev = if t == 0 { T::zero() } else { cells[i - d] };
                        df[i] = dc * (prev - xv[i]);
                        dxt[i] = dc * (T::one() - fv[i]);
                        dc_next[j] = dc * fv[i];
                    }
                }
                axpy(acc!(*xt), &dxt, T::one());
                axpy(acc!(*forget), &df, T::one());
                axpy(acc!(*reset), &dr, T::one());
            }
            Op::LstmScan {
                gates,
                recur,
                cache,
            } => {
                let uv = val(*recur).data();
                let (m, d) = (out.rows(), out.cols());
                let hidden = out.data();
                let mut dgates = vec![T::zero(); m * 4 * d];
                let mut du = vec![T::zero(); 4 * d * d];
                let mut dh_next = vec![T::zero(); d];
                let mut dc_next = vec![T::zero(); d];
                for t in (0..m).rev() {
                    let a = &cache.acts[t * 4 * d..(t + 1) * 4 * d];
                    let da = &mut dgates[t * 4 * d..(t + 1) * 4 * d];
                    for j in 0..d {
                        let (ig, fg, gg, og) = (a[j], a[d + j], a[2 * d + j], a[3 * d + j]);
                        let c = cache.cells[t * d + j];
                        let prev = if t == 0 {
                            T::zero()
                        } else {
                            cache.cells[(t - 1) * d + j]
                        };
                        let tc = c.tanh();
                        let dh = gd[t * d + j] + dh_next[j];
                        let d_o = dh * tc;
                        let dc = dc_next[j] + dh * og * (T::one() - tc * tc);
                        da[j] = dc * gg * ig * (T::one() - ig);
                        da[d + j] = dc * prev * fg * (T::one() - fg);
                        da[2 * d + j] = dc * ig * (T::one() - gg * gg);
                        da[3 * d + j] = d_o * og * (T::one() - og);
                        dc_next[j] = dc * fg;
                    }
                    dh_next.iter_mut().for_each(|x| *x = T::zero());
                    if t > 0 {
                        let h_prev = &hidden[(t - 1) * d..t * d];
                        // dU += da ⊗ h_prev, dh_prev = Uᵀ da
                        matmul_into(da, h_prev, &mut du, 4 * d, 1, d);
                        matmul_tn_into(uv, da, &mut dh_next, 4 * d, d, 1);
                    }
                }
                axpy(acc!(*gates), &dgates, T::one());
                axpy(acc!(*recur), &du, T::one());
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], x: &[T], alpha: T) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    nodes: &[Node<'_, T>],
    id: NodeId,
) -> &'a mut [T] {
    let shape = nodes[id.0].value.shape();
    grads[id.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}
