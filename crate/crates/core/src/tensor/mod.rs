//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Two layers:
//! - [`Tensor`]: a plain row-major `f64` array with a shape. Immutable in
//!   spirit; safe to share read-only across threads. Used for parameters,
//!   datasets and everything that lives outside a differentiated
//!   computation.
//! - [`Graph`]/[`Var`]: a define-by-run tape. Every forward op is recorded
//!   and replayed in reverse by [`Graph::backward`] to produce exact
//!   analytic gradients. A tape is rebuilt per forward pass and never
//!   shared between computations.

mod checkpoint;
mod graph;
mod store;

pub use checkpoint::{load_checkpoint, load_checkpoint_bytes, save_checkpoint, CheckpointError};
pub use graph::{Graph, Var, LEAK_CLIP, LEAK_SLOPE};
pub use store::{clip_global_grad_norm, AdamParams, ParamStore};

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },
    #[error("{op}: expected binary values (0 or 1), found {value}")]
    NonBinary { op: &'static str, value: f64 },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable belongs to a different graph")]
    GraphMismatch,
    #[error("parameter `{name}` has no accumulated gradient")]
    MissingGrad { name: String },
    #[error("parameter `{name}` not found in store")]
    UnknownParam { name: String },
    #[error("parameter `{name}` already present in store")]
    DuplicateParam { name: String },
}

/// Dense row-major array of `f64` scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape wants {numel} elements, data has {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// 2-D tensor from rows × cols row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() on non-2-D tensor");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Slice out `[index, .., ..]` of a 3-D tensor as a 2-D tensor.
    pub fn subtensor(&self, index: usize) -> Tensor {
        assert_eq!(self.shape.len(), 3, "subtensor() on non-3-D tensor");
        let step = self.shape[1] * self.shape[2];
        Tensor {
            shape: vec![self.shape[1], self.shape[2]],
            data: self.data[index * step..(index + 1) * step].to_vec(),
        }
    }
}

/// Format a shape for error messages.
pub(crate) fn shape_of(shape: &[usize]) -> Vec<usize> {
    shape.to_vec()
}
