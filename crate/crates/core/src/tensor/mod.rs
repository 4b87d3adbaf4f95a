//! Dense row-major tensors and the reverse-mode differentiation graph.
//!
//! `Tensor` is an immutable value: a shape plus a shared data buffer. A
//! tensor is either *detached* (a plain value) or *attached* to a [`Graph`]
//! that records the operations producing it so gradients can be replayed
//! backward. Detached tensors never receive gradients.

mod graph;
mod kernels;

pub mod conv;

pub use graph::{GradMap, Graph, NodeRef};
pub use kernels::matmul2d;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Floating-point precision tag carried in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn from_u8(v: u8) -> Option<Dtype> {
        match v {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn to_u8(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element type of a tensor. Implemented for `f32` (train precision)
/// and `f64` (test precision; wide enough for finite-difference checks).
pub trait Element:
    num_traits::Float + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn to_le_bytes(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn to_le_bytes(self) -> Vec<u8> {
        f32::to_le_bytes(self).to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes per f32"))
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn to_le_bytes(self) -> Vec<u8> {
        f64::to_le_bytes(self).to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes per f64"))
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: operands belong to different graphs")]
    CrossGraph { op: &'static str },
    #[error("backward requires a tensor attached to a graph")]
    DetachedBackward,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("shape extents must be positive, got {shape:?}")]
    ZeroExtent { shape: Vec<usize> },
    #[error("conv2d: input has {input} channels but kernel expects {kernel}")]
    ConvChannelMismatch { input: usize, kernel: usize },
    #[error(
        "conv2d: no output positions for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
    )]
    ConvNoOutput {
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    #[error("{op}: class index {index} out of range for {classes} classes")]
    ClassIndex {
        op: &'static str,
        index: usize,
        classes: usize,
    },
    #[error("{op}: row index {index} out of range for {rows} rows")]
    RowIndex {
        op: &'static str,
        index: usize,
        rows: usize,
    },
}

/// An n-dimensional numeric array with optional graph attachment.
#[derive(Clone)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    node: Option<NodeRef>,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("attached", &self.node.is_some())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    /// Builds a detached tensor, validating that extents are positive and
    /// that the buffer length matches the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent {
                shape: shape.to_vec(),
            });
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: E) -> Tensor<E> {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor<E> {
        Tensor::full(shape, E::zero())
    }

    pub fn full(shape: &[usize], v: E) -> Tensor<E> {
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive");
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel]),
            node: None,
        }
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Tensor<E> {
        let mut data = vec![E::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = E::one();
        }
        Tensor::from_vec(&[n, n], data).expect("eye shape is consistent")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Drops the graph attachment, yielding a plain value.
    pub fn detach(&self) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts every element to another precision. Detaches.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data: Vec<F> = self.data.iter().map(|v| F::from_f64(v.as_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            node: None,
        }
    }

    /// Largest element index (ties broken by the lowest index).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(&self, node: NodeRef) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: Some(node),
        }
    }
}

/// Broadcast result shape of two operand shapes, or a `ShapeMismatch`
/// naming both when they are incompatible.
pub(crate) fn broadcast_shape_of(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Vec<usize>> {
    kernels::broadcast_shape(lhs, rhs).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// Exact equality of shape and data bits; attachment is ignored.
pub fn bit_identical<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_le_bytes() == y.to_le_bytes())
}

/// Maximum absolute elementwise difference; panics on shape mismatch.
pub fn max_abs_diff<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff: shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        let err = Tensor::<f64>::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { len: 5, .. }));
    }

    #[test]
    fn from_vec_rejects_zero_extent() {
        let err = Tensor::<f64>::from_vec(&[2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::ZeroExtent { .. }));
    }

    #[test]
    fn argmax_ties_break_low() {
        let t = Tensor::<f64>::from_vec(&[4], vec![1.0, 3.0, 3.0, 0.0]).unwrap();
        assert_eq!(t.argmax(), 1);
    }

    #[test]
    fn cast_round_trips_f64_to_f32() {
        let t = Tensor::<f64>::from_vec(&[2], vec![0.5, -1.25]).unwrap();
        let f: Tensor<f32> = t.cast();
        assert_eq!(f.data(), &[0.5f32, -1.25f32]);
    }
}
