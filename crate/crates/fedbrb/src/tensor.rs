//! Dense row-major f64 tensors with channel-indexed gather/scatter.
//!
//! This is the substrate every partitioning and training operation runs on.
//! Tensors are immutable values: every operation returns a new tensor, so
//! they can be shared read-only across concurrent client-training tasks.

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor shape must have at least one dimension")]
    EmptyShape,
    #[error("tensor dimensions must be >= 1")]
    ZeroDim,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("index {index} out of bounds for dimension {dim} of size {size}")]
    IndexOutOfBounds { index: usize, dim: usize, size: usize },
    #[error("duplicate index {index} in channel selection")]
    DuplicateIndex { index: usize },
    #[error("in_indices given for a tensor without a second dimension")]
    SelectionRank,
    #[error("non-finite value produced by tensor operation")]
    NonFinite,
}

/// Channel selection along the first two dimensions of a tensor.
///
/// `out_indices` select dimension 0, `in_indices` dimension 1. An empty
/// `in_indices` means "take dimension 1 whole" (and is the only valid form
/// for 1-D tensors such as biases). Order is significant and preserved by
/// gather/scatter round-trips.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSelection {
    pub out_indices: Vec<usize>,
    pub in_indices: Vec<usize>,
}

impl ChannelSelection {
    pub fn new(out_indices: Vec<usize>, in_indices: Vec<usize>) -> Self {
        Self { out_indices, in_indices }
    }

    /// Selection of dimension 0 only; dimension 1 (if any) taken whole.
    pub fn rows(out_indices: Vec<usize>) -> Self {
        Self { out_indices, in_indices: Vec::new() }
    }
}

/// Dense tensor: explicit shape, flat row-major f64 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        Self::filled(shape, 0.0)
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        validate_shape(shape)?;
        let len = shape.iter().product();
        Ok(Self { shape: shape.to_vec(), data: vec![value; len] })
    }

    /// Tensor from a flat row-major buffer. Length must match the shape
    /// product and all values must be finite.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        validate_shape(shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(TensorError::ShapeMismatch {
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros_like(&self) -> Self {
        Self { shape: self.shape.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Element at row-major position (dim0, dim1) of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Slice with dim0 restricted to `sel.out_indices` and dim1 to
    /// `sel.in_indices` (trailing dimensions copied whole). The result
    /// preserves selection order.
    pub fn gather_channels(&self, sel: &ChannelSelection) -> Result<Self, TensorError> {
        let (d1, trailing) = self.inner_dims();
        validate_indices(&sel.out_indices, 0, self.shape[0])?;
        let whole_in: Vec<usize>;
        let in_idx: &[usize] = if sel.in_indices.is_empty() {
            whole_in = (0..d1).collect();
            &whole_in
        } else {
            if self.shape.len() < 2 {
                return Err(TensorError::SelectionRank);
            }
            validate_indices(&sel.in_indices, 1, d1)?;
            &sel.in_indices
        };

        let mut out_shape = Vec::with_capacity(self.shape.len());
        out_shape.push(sel.out_indices.len());
        if self.shape.len() >= 2 {
            out_shape.push(in_idx.len());
            out_shape.extend_from_slice(&self.shape[2..]);
        }

        let mut data = Vec::with_capacity(out_shape.iter().product());
        for &oi in &sel.out_indices {
            for &ii in in_idx {
                let start = (oi * d1 + ii) * trailing;
                data.extend_from_slice(&self.data[start..start + trailing]);
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Adds `weight * delta` onto the cells selected by `sel`, leaving all
    /// other cells bit-identical. `delta` must have the gathered shape for
    /// `sel`; the operation is the positional inverse of [`gather_channels`].
    ///
    /// [`gather_channels`]: Tensor::gather_channels
    pub fn scatter_add_channels(
        &self,
        sel: &ChannelSelection,
        delta: &Tensor,
        weight: f64,
    ) -> Result<Self, TensorError> {
        let (d1, trailing) = self.inner_dims();
        validate_indices(&sel.out_indices, 0, self.shape[0])?;
        let whole_in: Vec<usize>;
        let in_idx: &[usize] = if sel.in_indices.is_empty() {
            whole_in = (0..d1).collect();
            &whole_in
        } else {
            if self.shape.len() < 2 {
                return Err(TensorError::SelectionRank);
            }
            validate_indices(&sel.in_indices, 1, d1)?;
            &sel.in_indices
        };

        let expected = sel.out_indices.len() * in_idx.len() * trailing;
        if delta.data.len() != expected {
            return Err(TensorError::ShapeMismatch {
                expected: vec![sel.out_indices.len(), in_idx.len(), trailing],
                got: delta.shape.clone(),
            });
        }

        let mut out = self.clone();
        let mut src = 0;
        for &oi in &sel.out_indices {
            for &ii in in_idx {
                let dst = (oi * d1 + ii) * trailing;
                for k in 0..trailing {
                    out.data[dst + k] += weight * delta.data[src + k];
                }
                src += trailing;
            }
        }
        if !out.data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(out)
    }

    /// Elementwise `self + alpha * other`; shapes must match.
    pub fn add_scaled(&self, other: &Tensor, alpha: f64) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + alpha * b)
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// (size of dim1 or 1, product of dims after the second or 1).
    fn inner_dims(&self) -> (usize, usize) {
        let d1 = if self.shape.len() >= 2 { self.shape[1] } else { 1 };
        let trailing: usize = if self.shape.len() > 2 {
            self.shape[2..].iter().product()
        } else {
            1
        };
        (d1, trailing)
    }
}

fn validate_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::ZeroDim);
    }
    Ok(())
}

fn validate_indices(indices: &[usize], dim: usize, size: usize) -> Result<(), TensorError> {
    let mut seen = vec![false; size];
    for &idx in indices {
        if idx >= size {
            return Err(TensorError::IndexOutOfBounds { index: idx, dim, size });
        }
        if seen[idx] {
            return Err(TensorError::DuplicateIndex { index: idx });
        }
        seen[idx] = true;
    }
    Ok(())
}
