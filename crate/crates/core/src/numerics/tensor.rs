use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array.
///
/// Vectors have shape `[k]`, matrices `[rows, cols]`, and scalars are stored
/// as `[1]`. Gradients are not stored here; a [`Graph`](super::Graph) keeps
/// one adjoint per recorded node.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must be non-empty with positive dimensions, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("from_vec", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on a zero-sized dimension.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid tensor shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Panics on an empty slice.
    pub fn vector(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = T::one();
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix; 1 for a vector.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn column(&self, col: usize) -> Result<Self> {
        if !self.is_matrix() || col >= self.cols() {
            return Err(Error::InvalidArgument(format!(
                "column {col} out of range for shape {:?}",
                self.shape
            )));
        }
        let c = self.cols();
        Ok(Self::vector(
            (0..self.rows()).map(|r| self.data[r * c + col]).collect(),
        ))
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `[m×k]·[k×n] -> [m×n]`, or `[m×k]·[k] -> [m]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if !self.is_matrix() || other.ndim() > 2 || self.cols() != other.rows() {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k) = (self.rows(), self.cols());
        let n = other.cols();
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        let shape = if other.is_vector() {
            vec![m]
        } else {
            vec![m, n]
        };
        Ok(Self { shape, data: out })
    }

    pub fn transpose(&self) -> Result<Self> {
        if !self.is_matrix() {
            return Err(Error::dim("transpose", &self.shape, &[]));
        }
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|x| x * factor)
    }

    pub fn tanh(&self) -> Self {
        self.map(T::tanh)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    /// Softmax over all entries, with max-subtraction.
    pub fn softmax(&self) -> Result<Self> {
        Ok(Self {
            shape: self.shape.clone(),
            data: softmax(&self.data)?,
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.data.len() != other.data.len() {
            return Err(Error::dim("dot", &self.shape, &other.shape));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn l2_norm_sq(&self) -> T {
        dot(&self.data, &self.data)
    }

    pub fn l2_norm(&self) -> T {
        self.l2_norm_sq().sqrt()
    }

    /// Concatenates vectors end to end.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self::vector(data))
    }

    /// Vector `[start, start+len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.data.len() {
            return Err(Error::dim("slice", &self.shape, &[start, len]));
        }
        Ok(Self::vector(self.data[start..start + len].to_vec()))
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn softmax<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::dim("softmax", &[0], &[]));
    }
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

pub(crate) fn argmax<T: Scalar>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_tn_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let col = t(&[2, 1], &[1.0, 2.0]);
        assert_eq!(Tensor::identity(2).matmul(&col).unwrap(), col);

        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(a.matmul(&ones).unwrap(), t(&[2, 1], &[3.0, 7.0]));

        let z = Tensor::<f64>::zeros(&[2, 3]);
        let any = t(&[3, 1], &[5.0, -1.0, 2.5]);
        assert_eq!(z.matmul(&any).unwrap(), Tensor::zeros(&[2, 1]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 1]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn matrix_vector_product_is_a_vector() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let v = Tensor::vector(vec![1.0, 1.0]);
        let out = a.matmul(&v).unwrap();
        assert_eq!(out.shape(), &[2]);
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn activations() {
        assert_eq!(Tensor::scalar(0.0f64).tanh().item(), 0.0);
        assert_eq!(Tensor::scalar(0.0f64).sigmoid().item(), 0.5);
        assert!((Tensor::scalar(1.0f64).tanh().item() - 0.761_594_155_955_764_9).abs() < 1e-15);
        // Extreme inputs stay finite.
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::vector(vec![0.0f64, 0.0]).softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = Tensor::vector(vec![1000.0f64, 0.0]).softmax().unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);

        let s = Tensor::vector(vec![1.0f64, 2.0, 3.0]).softmax().unwrap();
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn norms() {
        assert_eq!(Tensor::<f64>::zeros(&[4]).l2_norm_sq(), 0.0);
        assert_eq!(Tensor::vector(vec![3.0f64, 4.0]).l2_norm_sq(), 25.0);
        assert_eq!(Tensor::vector(vec![0.0f64, 1.0, 0.0]).l2_norm_sq(), 1.0);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(Tensor::vector(vec![0.5f64, 0.5]).argmax(), 0);
        assert_eq!(Tensor::vector(vec![0.1f64, 0.9]).argmax(), 1);
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.0, 4.0]);
        let b = t(
            &[4, 3],
            &[1.0, 0.0, 2.0, -1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 2.0, -3.0, 1.0],
        );
        let expected = a.matmul(&b.transpose().unwrap()).unwrap();
        let mut out = vec![0.0; 8];
        matmul_nt_into(a.data(), b.data(), &mut out, 2, 3, 4);
        assert_eq!(out, expected.data());

        let c = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let expected = a.transpose().unwrap().matmul(&c).unwrap();
        let mut out = vec![0.0; 12];
        matmul_tn_into(a.data(), c.data(), &mut out, 2, 3, 4);
        assert_eq!(out, expected.data());
    }

    #[test]
    fn single_precision_works() {
        let a = Tensor::<f32>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::<f32>::vector(vec![1.0, 1.0]);
        assert_eq!(a.matmul(&v).unwrap().data(), &[3.0f32, 7.0]);
        let s = Tensor::vector(vec![1.0f32, 2.0, 3.0]).softmax().unwrap();
        assert!((s.sum() - 1.0).abs() < 1e-6);
    }
}
