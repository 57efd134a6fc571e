//! Dense row-major f64 tensors and the reverse-mode autodiff graph over them.
//!
//! `Tensor` is a plain shape + buffer pair with no autodiff state; `Graph`
//! (in [`graph`]) owns all differentiable computation. The raw numeric
//! kernels live in [`kernels`] and are shared between graph ops and the
//! frozen (non-differentiated) forward paths, so both sides agree bit-for-bit.

pub mod fdmp;
pub mod gradcheck;
pub mod graph;
pub mod kernels;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{Graph, Var};

/// Errors for tensor construction, graph ops, and the FDMP file format.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op} does not support rank {got}")]
    BadRank { op: &'static str, got: usize },
    #[error("element count {count} does not fit dims {dims:?}")]
    BadElementCount { dims: Vec<usize>, count: usize },
    #[error("invalid {what}: {why}")]
    BadArgument { what: &'static str, why: String },
    #[error("binary cross-entropy target must be 0 or 1, found {0}")]
    NonBinaryTarget(f64),
    #[error("backward already ran on this graph; call zero_grads first")]
    BackwardTwice,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("bad magic bytes; not an FDMP file")]
    BadMagic,
    #[error("unsupported FDMP version {0}")]
    BadVersion(u32),
    #[error("FDMP payload truncated")]
    Truncated,
    #[error("FDMP dimensions overflow addressable size")]
    DimOverflow,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor of f64 values.
///
/// Rank 0 is a scalar: `dims == []`, one element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; element_count(dims)],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; element_count(dims)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if element_count(dims) != data.len() {
            return Err(TensorError::BadElementCount {
                dims: dims.to_vec(),
                count: data.len(),
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Gaussian init with the given std, from a caller-owned RNG.
    pub fn randn(dims: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: crate::seeded::normal_vec(rng, element_count(dims), std),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.dims);
        self.data[0]
    }

    /// Value at a multi-index. Debug-asserts bounds.
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[flat_index(&self.dims, idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let i = flat_index(&self.dims, idx);
        self.data[i] = value;
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        if element_count(dims) != self.data.len() {
            return Err(TensorError::BadElementCount {
                dims: dims.to_vec(),
                count: self.data.len(),
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Content hash over shape and exact bit patterns; used by freeze audits.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 * (self.dims.len() + self.data.len() + 1));
        bytes.extend_from_slice(&(self.dims.len() as u64).to_le_bytes());
        for &d in &self.dims {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            bytes.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

pub(crate) fn element_count(dims: &[usize]) -> usize {
    dims.iter().product()
}

pub(crate) fn flat_index(dims: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(dims.len(), idx.len());
    let mut flat = 0;
    for (d, i) in dims.iter().zip(idx) {
        debug_assert!(i < d, "index {idx:?} out of bounds for {dims:?}");
        flat = flat * d + i;
    }
    flat
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::BadElementCount { .. }));
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.ndim(), 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn flat_index_is_row_major() {
        // [i,j,k] in a [2,3,4] tensor sits at i*12 + j*4 + k.
        assert_eq!(flat_index(&[2, 3, 4], &[1, 2, 3]), 23);
        assert_eq!(flat_index(&[2, 3, 4], &[0, 1, 0]), 4);
    }

    #[test]
    fn checksum_tracks_content_and_shape() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut c = a.clone();
        assert_eq!(a.checksum(), c.checksum());
        assert_ne!(a.checksum(), b.checksum());
        c.set(&[0, 1], 2.0 + 1e-16);
        // identical value -> identical hash; any bit flip changes it
        c.set(&[0, 1], 2.0000001);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn fnv_matches_reference_vector() {
        // Known FNV-1a test vector: empty input hashes to the offset basis.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
