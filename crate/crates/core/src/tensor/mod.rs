//! Differentiable n-dimensional arrays over a recording tape.
//!
//! A [`Tensor`] is an immutable f64 array in row-major order. Operations live
//! on a [`Tape`]: each op evaluates eagerly and, when any input is tracked,
//! records enough state to replay the chain rule in reverse. Constants (model
//! parameters during an attack, cached clean activations) are plain tensors
//! with no tape entry and never receive gradients.

use std::sync::Arc;

use thiserror::Error;

mod tape;

pub use tape::{Gradients, Tape};

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {} and {}", fmt_shape(lhs), fmt_shape(rhs))]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {} holds {expected} values, got {got}", fmt_shape(shape))]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected a matrix, got shape {}", fmt_shape(shape))]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: axis {axis} invalid for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: range {start}..{} exceeds extent {extent}", start + len)]
    RangeOutOfBounds {
        op: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("gather: index {index} out of bounds for {len} source elements")]
    GatherOutOfBounds { index: usize, len: usize },
    #[error("cross_entropy: target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward: loss must be a scalar, got shape {}", fmt_shape(shape))]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor was not recorded on this tape")]
    NotOnTape,
    #[error("{op}: operands were recorded on different tapes")]
    TapeMismatch { op: &'static str },
}

fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(", "))
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Handle into a tape: which tape (by unique id) and which node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub index: usize,
}

/// Immutable f64 array with shape, optionally tracked on a tape.
///
/// Cloning is cheap (the value buffer is shared). Values are never mutated
/// in place; every operation allocates its output.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major values.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let expected = numel(&shape);
        if expected != values.len() {
            return Err(TensorError::LengthMismatch {
                op: "new",
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            shape,
            values: Arc::new(values),
            node: None,
        })
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            values: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            values: Arc::new(vec![value; n]),
            node: None,
        }
    }

    pub(crate) fn with_node(shape: Vec<usize>, values: Arc<Vec<f64>>, node: NodeRef) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        Self {
            shape,
            values,
            node: Some(node),
        }
    }

    pub(crate) fn from_arc(shape: Vec<usize>, values: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        Self {
            shape,
            values,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Single value of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on tensor with {} elements", self.values.len());
        self.values[0]
    }

    /// Same values, detached from any tape. Gradients never flow into a
    /// detached tensor.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Row count / column count of a matrix; panics on non-matrix use is
    /// avoided by returning errors in the ops that require matrices.
    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::NotAMatrix {
                op,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

impl PartialEq for Tensor {
    /// Bitwise value-and-shape equality (tape tracking is ignored).
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
