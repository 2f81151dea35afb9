//! Vector quantization shared by the image and camera tokenizers.
//!
//! Features and codewords are flat row-major buffers: `n` cells of `dim`
//! values each. The losses follow the usual VQ-VAE split: `codebook_loss`
//! moves codewords toward the (stopped) encoder features, `commitment_loss`
//! pulls features toward their (stopped) codewords, both averaged over cells.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default weight of the commitment term.
pub const DEFAULT_COMMITMENT_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QuantizerError {
    #[error("feature length {len} is not a multiple of codebook dim {dim}")]
    DimensionMismatch { len: usize, dim: usize },
    #[error("codebook needs K >= 2 and dim >= 1 (got K={size}, dim={dim})")]
    InvalidShape { size: usize, dim: usize },
    #[error("codebook contains non-finite values")]
    NonFinite,
    #[error("usage counter is empty")]
    EmptyCounter,
    #[error("data-driven init needs {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("codeword index {0} out of range")]
    InvalidIndex(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    vectors: Vec<T>,
    size: usize,
    dim: usize,
}

impl<T: Float> Codebook<T> {
    pub fn new(vectors: Vec<T>, size: usize, dim: usize) -> Result<Self, QuantizerError> {
        if size < 2 || dim == 0 {
            return Err(QuantizerError::InvalidShape { size, dim });
        }
        if vectors.len() != size * dim {
            return Err(QuantizerError::DimensionMismatch { len: vectors.len(), dim });
        }
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(QuantizerError::NonFinite);
        }
        Ok(Self { vectors, size, dim })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[T] {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut [T] {
        &mut self.vectors
    }

    pub fn codeword(&self, k: usize) -> &[T] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the nearest codeword; ties go to the smaller index.
    pub fn nearest(&self, feature: &[T]) -> usize {
        let mut best = 0;
        let mut best_dist = T::infinity();
        for (k, code) in self.vectors.chunks_exact(self.dim).enumerate() {
            let dist = squared_distance(feature, code);
            if dist < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        best
    }

    /// Looks up codewords for a grid of indices.
    pub fn lookup(&self, indices: &[usize]) -> Result<Vec<T>, QuantizerError> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &k in indices {
            if k >= self.size {
                return Err(QuantizerError::InvalidIndex(k));
            }
            out.extend_from_slice(self.codeword(k));
        }
        Ok(out)
    }
}

fn squared_distance<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult<T> {
    pub indices: Vec<usize>,
    pub quantized: Vec<T>,
    pub codebook_loss: T,
    pub commitment_loss: T,
}

pub fn quantize<T: Float>(features: &[T], codebook: &Codebook<T>) -> Result<QuantizeResult<T>, QuantizerError> {
    let dim = codebook.dim;
    if features.len() % dim != 0 {
        return Err(QuantizerError::DimensionMismatch { len: features.len(), dim });
    }
    let cells = features.len() / dim;
    let mut indices = Vec::with_capacity(cells);
    let mut quantized = Vec::with_capacity(features.len());
    let mut total = T::zero();
    for f in features.chunks_exact(dim) {
        let k = codebook.nearest(f);
        let code = codebook.codeword(k);
        total = total + squared_distance(f, code);
        indices.push(k);
        quantized.extend_from_slice(code);
    }
    let mean = if cells == 0 { T::zero() } else { total / T::from(cells).unwrap() };
    // Both terms share a forward value; they differ only in where gradients flow.
    Ok(QuantizeResult { indices, quantized, codebook_loss: mean, commitment_loss: mean })
}

/// Forward value of `sg[z − f] + f`, which is just `z`.
pub fn straight_through<T: Float>(features: &[T], quantized: &[T]) -> Vec<T> {
    debug_assert_eq!(features.len(), quantized.len());
    quantized.to_vec()
}

/// Backward of [`straight_through`]: the Jacobian with respect to the
/// features is the identity.
pub fn straight_through_backward<T: Float>(grad_output: &[T]) -> Vec<T> {
    grad_output.to_vec()
}

pub fn vq_loss<T: Float>(result: &QuantizeResult<T>, commitment_weight: T) -> T {
    result.codebook_loss + commitment_weight * result.commitment_loss
}

/// Gradients of [`vq_loss`]: `(d/d features, d/d codebook vectors)`.
pub fn vq_loss_grads<T: Float>(
    features: &[T],
    result: &QuantizeResult<T>,
    codebook: &Codebook<T>,
    commitment_weight: T,
) -> (Vec<T>, Vec<T>) {
    let dim = codebook.dim;
    let cells = result.indices.len().max(1);
    let two_over_n = T::from(2.0).unwrap() / T::from(cells).unwrap();
    let mut grad_features = vec![T::zero(); features.len()];
    let mut grad_codebook = vec![T::zero(); codebook.vectors.len()];
    for (cell, &k) in result.indices.iter().enumerate() {
        let f = &features[cell * dim..(cell + 1) * dim];
        let z = codebook.codeword(k);
        for j in 0..dim {
            let diff = f[j] - z[j];
            grad_features[cell * dim + j] = commitment_weight * two_over_n * diff;
            grad_codebook[k * dim + j] = grad_codebook[k * dim + j] - two_over_n * diff;
        }
    }
    (grad_features, grad_codebook)
}

/// Per-codeword selection counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageCounter {
    counts: Vec<u64>,
    total: u64,
}

impl UsageCounter {
    pub fn new(size: usize) -> Self {
        Self { counts: vec![0; size], total: 0 }
    }

    /// Rebuilds a counter from saved per-code counts.
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn record(&mut self, indices: &[usize]) -> Result<(), QuantizerError> {
        for &k in indices {
            let slot = self.counts.get_mut(k).ok_or(QuantizerError::InvalidIndex(k))?;
            *slot += 1;
            self.total += 1;
        }
        Ok(())
    }

    /// Elementwise sum; order of merging does not matter.
    pub fn merge(&mut self, other: &UsageCounter) {
        assert_eq!(self.counts.len(), other.counts.len(), "merging counters of different sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn usage(&self) -> Result<f64, QuantizerError> {
        if self.total == 0 {
            return Err(QuantizerError::EmptyCounter);
        }
        let used = self.counts.iter().filter(|&&c| c > 0).count();
        Ok(used as f64 / self.counts.len() as f64)
    }

    pub fn dead_codes(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(k, _)| k)
    }
}

/// Deterministic codebook initialization.
///
/// Without samples every component is uniform on `[−1/K, 1/K]`. With
/// `sample_features` (a flat buffer of `dim`-sized rows) K distinct rows are
/// drawn as the initial codewords.
pub fn init_codebook<T: Float>(
    seed: u64,
    size: usize,
    dim: usize,
    sample_features: Option<&[T]>,
) -> Result<Codebook<T>, QuantizerError> {
    if size < 2 || dim == 0 {
        return Err(QuantizerError::InvalidShape { size, dim });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = match sample_features {
        None => {
            let bound = 1.0 / size as f64;
            (0..size * dim)
                .map(|_| T::from(rng.random_range(-bound..=bound)).unwrap())
                .collect()
        }
        Some(features) => {
            if features.len() % dim != 0 {
                return Err(QuantizerError::DimensionMismatch { len: features.len(), dim });
            }
            let rows = features.len() / dim;
            if rows < size {
                return Err(QuantizerError::InsufficientSamples { needed: size, got: rows });
            }
            let mut out = Vec::with_capacity(size * dim);
            for row in sample(&mut rng, rows, size).into_iter() {
                out.extend_from_slice(&features[row * dim..(row + 1) * dim]);
            }
            out
        }
    };
    Codebook::new(vectors, size, dim)
}

/// Re-seeds every codeword with zero count from randomly chosen feature rows.
/// Returns how many codewords were replaced.
pub fn restart_dead_codes<T: Float, R: Rng>(
    codebook: &mut Codebook<T>,
    counter: &UsageCounter,
    features: &[T],
    rng: &mut R,
) -> usize {
    let dim = codebook.dim;
    let rows = features.len() / dim;
    if rows == 0 {
        return 0;
    }
    let dead: Vec<usize> = counter.dead_codes().collect();
    for &k in &dead {
        let row = rng.random_range(0..rows);
        codebook.vectors[k * dim..(k + 1) * dim].copy_from_slice(&features[row * dim..(row + 1) * dim]);
    }
    dead.len()
}
