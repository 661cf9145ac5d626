//! Minimal deterministic tensor engine with reverse-mode autodiff.
//!
//! Values are dense row-major `f32` buffers in `N,C,H,W` order for image-like
//! data. Reductions accumulate in `f64` so finite-difference checks stay
//! meaningful at small scale. There is no broadcasting beyond the leading
//! batch dimensions of [`graph::Graph::matmul`]; every other shape change is
//! an explicit reshape/permute.

mod graph;
mod kernels;
pub mod utd;

pub use graph::{Graph, Op, Value, REGISTERED_DIFFERENTIABLE_OPS};

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: data length {len} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {detail}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this graph; build a fresh graph per step")]
    BackwardConsumed,
    #[error("kernel {kh}x{kw} larger than padded input {h}x{w}")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        h: usize,
        w: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense N-dimensional `f32` array. The universal value type of the engine.
///
/// Invariants: `product(shape) == data.len()`, and `grad`, when present, has
/// the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                op: "Tensor::new",
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full([1usize], value)
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Vec<f32> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// True when every element is finite (no NaN/Inf).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() requires a one-element tensor");
        self.data[0]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                op: "reshaped",
                shape,
                len: self.data.len(),
                expected,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Flat index into an `[N,C,H,W]` buffer.
#[inline(always)]
pub(crate) fn idx4(n: usize, c: usize, h: usize, w: usize, ch: usize, hh: usize, ww: usize) -> usize {
    ((n * ch + c) * hh + h) * ww + w
}
