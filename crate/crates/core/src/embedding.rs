//! Embedding vectors and row-major embedding matrices.
//!
//! All in-memory arithmetic is 64-bit. The on-disk store format packs
//! values as `f32`; see [`crate::store`].

use thiserror::Error;

/// Norms at or below this floor are treated as zero for normalization.
pub const NORM_FLOOR: f64 = 1e-12;

/// Tolerance on `|norm - 1|` for a vector to count as unit length.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("cannot normalize: vector norm {norm:e} is at or below {NORM_FLOOR:e}")]
    ZeroVector { norm: f64 },
    #[error("component {index} is not finite")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("data length {len} is not a multiple of dimension {dim}")]
    RaggedData { len: usize, dim: usize },
    #[error("dimension must be at least 1")]
    ZeroDim,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ||v||`, or `ZeroVector` when the norm is at or below [`NORM_FLOOR`].
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    check_finite(v)?;
    let norm = l2_norm(v);
    if norm <= NORM_FLOOR {
        return Err(EmbeddingError::ZeroVector { norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub(crate) fn check_finite(v: &[f64]) -> Result<(), EmbeddingError> {
    for (index, x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(EmbeddingError::NonFinite { index });
        }
    }
    Ok(())
}

/// A finite real vector, optionally unit-normalized by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Rejects non-finite components.
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn normalized(&self) -> Result<Self, EmbeddingError> {
        Ok(Self { values: l2_normalize(&self.values)? })
    }

    /// True when the norm is within [`UNIT_TOLERANCE`] of 1.
    pub fn is_unit(&self) -> bool {
        (l2_norm(&self.values) - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn dot(&self, other: &Self) -> Result<f64, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(dot(&self.values, &other.values))
    }
}

/// Dense `count x dim` matrix of embeddings, row-major.
///
/// `normalized` mirrors the store flag: it records the producer's claim
/// that every row is unit length, and is not re-verified on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    normalized: bool,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, normalized: bool, data: Vec<f64>) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        if data.len() % dim != 0 {
            return Err(EmbeddingError::RaggedData { len: data.len(), dim });
        }
        Ok(Self { dim, normalized, data })
    }

    pub fn from_rows(rows: &[Vec<f64>], normalized: bool) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(EmbeddingError::DimensionMismatch { expected: dim, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, normalized, data)
    }

    pub fn empty(dim: usize, normalized: bool) -> Result<Self, EmbeddingError> {
        Self::new(dim, normalized, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn set_normalized(&mut self, flag: bool) {
        self.normalized = flag;
    }

    /// Panics when `index >= count`.
    pub fn row(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}
