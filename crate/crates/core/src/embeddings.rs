//! One-hot encoding and the word-embedding matrix `S` (one column per
//! vocabulary entry), with seeded Gaussian initialization and GloVe loading.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::textdata::Vocabulary;

/// Indicator vector with a single 1 at `index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneHot {
    pub index: usize,
    pub dim: usize,
}

impl OneHot {
    pub fn to_dense<T: Scalar>(&self) -> Tensor<T> {
        let mut v = Tensor::zeros(&[self.dim]);
        v.data_mut()[self.index] = T::one();
        v
    }
}

/// Unknown tokens encode to the reserved index 0.
pub fn one_hot(token: &str, vocab: &Vocabulary) -> OneHot {
    OneHot {
        index: vocab.index(token),
        dim: vocab.len(),
    }
}

/// `S ∈ R^{n×|Y|}`: column `t` is the vector of vocabulary entry `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<T> {
    matrix: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn new(matrix: Tensor<T>, trainable: bool) -> Result<Self> {
        if !matrix.is_matrix() {
            return Err(Error::InvalidArgument(format!(
                "embedding matrix must be 2-D, got {:?}",
                matrix.shape()
            )));
        }
        Ok(Self { matrix, trainable })
    }

    /// Entries drawn i.i.d. from N(0, 1) with a seeded generator.
    pub fn init_gaussian(vocab_size: usize, dim: usize, seed: u64) -> Self {
        assert!(
            dim >= 1 && vocab_size >= 1,
            "embedding shape must be positive"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dim * vocab_size)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self {
            matrix: Tensor::from_vec(&[dim, vocab_size], data).expect("shape matches"),
            trainable: true,
        }
    }

    /// Embedding dimension `n`.
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Tensor<T> {
        &mut self.matrix
    }

    /// `S · ε_t`, computed as a column read.
    pub fn lookup(&self, eps: &OneHot) -> Result<Tensor<T>> {
        if eps.dim != self.vocab_size() {
            return Err(Error::dim("lookup", self.matrix.shape(), &[eps.dim]));
        }
        self.column(eps.index)
    }

    pub fn column(&self, token: usize) -> Result<Tensor<T>> {
        if token >= self.vocab_size() {
            return Err(Error::InvalidArgument(format!(
                "token index {token} out of range for vocabulary of {}",
                self.vocab_size()
            )));
        }
        self.matrix.column(token)
    }

    /// Sentence matrix `[m×n]` whose row `i` is the vector of `tokens[i]`.
    pub fn gather(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let (n, cols) = (self.dim(), self.vocab_size());
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot embed an empty sentence".into(),
            ));
        }
        let mut data = Vec::with_capacity(tokens.len() * n);
        for &t in tokens {
            if t >= cols {
                return Err(Error::InvalidArgument(format!(
                    "token index {t} out of range"
                )));
            }
            data.extend((0..n).map(|r| self.matrix.data()[r * cols + t]));
        }
        Tensor::from_vec(&[tokens.len(), n], data)
    }

    /// Adds row `i` of `grad_rows` (`[m×n]`) into column `tokens[i]` of a
    /// row-major `[n×|Y|]` gradient buffer. No-op when frozen.
    pub fn scatter_grad(&self, tokens: &[usize], grad_rows: &[T], out: &mut [T]) {
        if !self.trainable {
            return;
        }
        let (n, cols) = (self.dim(), self.vocab_size());
        for (i, &t) in tokens.iter().enumerate() {
            for r in 0..n {
                out[r * cols + t] += grad_rows[i * n + r];
            }
        }
    }
}

/// Result of reading a GloVe text file against a vocabulary.
#[derive(Clone, Debug)]
pub struct GloveLoad<T> {
    pub embeddings: EmbeddingMatrix<T>,
    /// Vocabulary entries (excluding the unknown token) found in the file.
    pub matched: usize,
    /// `matched / (|Y| - 1)`.
    pub coverage: f64,
}

/// Fills `S` from a GloVe text file (`token v1 … vn` per line).
///
/// Every column starts as a seeded N(0, 1) draw; tokens found in the file
/// overwrite their column, so the result does not depend on line order.
pub fn load_glove<T: Scalar>(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<GloveLoad<T>> {
    let path = path.as_ref();
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "embedding dimension must be positive".into(),
        ));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut embeddings = EmbeddingMatrix::<T>::init_gaussian(vocab.len(), dim, seed);
    let cols = vocab.len();
    let mut seen = HashSet::new();
    let mut line = Vec::new();
    let mut reader = BufReader::new(file);
    let mut lineno = 0;
    loop {
        line.clear();
        let read = reader
            .read_until(b'\n', &mut line)
            .map_err(|e| Error::io(path, e))?;
        if read == 0 {
            break;
        }
        lineno += 1;
        let text = String::from_utf8_lossy(&line);
        let text = text.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let mut fields = text.split(' ');
        let token = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.filter(|f| !f.is_empty()).collect();
        if values.len() != dim {
            return Err(parse_err(format!(
                "expected {dim} values, found {}",
                values.len()
            )));
        }
        let Some(col) = vocab.get(token) else {
            continue;
        };
        if !seen.insert(col) {
            return Err(parse_err(format!("duplicate entry for {token:?}")));
        }
        let data = embeddings.matrix_mut().data_mut();
        for (r, v) in values.iter().enumerate() {
            let x: f64 = v
                .parse()
                .map_err(|_| parse_err(format!("invalid number {v:?}")))?;
            data[r * cols + col] = T::lit(x);
        }
    }
    let matched = seen
        .iter()
        .filter(|&&c| c != crate::textdata::UNK_INDEX)
        .count();
    let coverage = if cols > 1 {
        matched as f64 / (cols - 1) as f64
    } else {
        0.0
    };
    info!(
        "glove {}: {matched}/{} vocabulary tokens covered ({:.1}%)",
        path.display(),
        cols.saturating_sub(1),
        100.0 * coverage
    );
    Ok(GloveLoad {
        embeddings,
        matched,
        coverage,
    })
}
