//! Dense double-precision tensors and a reverse-mode gradient graph.
//!
//! Everything the diagnostic model needs runs through this module: row-major
//! f64 matrices, a define-by-run operation graph, a single-sweep backward
//! pass, and a central-finite-difference gradient checker. Shapes must match
//! exactly; the only broadcasting is scalar-tensor.

mod check;
mod graph;

pub use check::{grad_check, NamedTensors};
pub use graph::{Gradients, Graph, NodeId};

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
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index {index} out of range ({limit} available)")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("loss must be a 1x1 scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("duplicate leaf name '{name}'")]
    DuplicateLeaf { name: String },
    #[error("stack_rows needs at least one input row")]
    EmptyStack,
    #[error("{op}: input must have at least one column per row")]
    EmptyRows { op: &'static str },
    #[error("grad_check eps must be in (0, 1e-2], got {eps}")]
    EpsOutOfRange { eps: f64 },
    #[error("grad_check: function value not finite at a perturbed point of '{name}'")]
    NonFiniteEval { name: String },
}

/// A feature matrix is a plain rank-2 tensor (rows = tokens or patches,
/// columns = hidden dimension).
pub type FeatureMatrix = Tensor;

/// Dense row-major tensor of f64 values.
///
/// All factory methods produce rank-2 tensors; the shape/data-length
/// invariant is enforced on construction and cannot be broken afterwards
/// (mutable access hands out a fixed-length slice).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor from an explicit shape and row-major data.
    ///
    /// Dimensions may be zero (such tensors are empty); non-finite values
    /// are rejected.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Rank-2 constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Build from nested row slices; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|row| row.len() != c) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                lhs: vec![r, c],
                rhs: vec![1, bad.len()],
            });
        }
        Tensor::matrix(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
            requires_grad: false,
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![1.0; rows * cols],
            requires_grad: false,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
            requires_grad: false,
        }
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Mark the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. The length is fixed, so the shape
    /// invariant survives any edit.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor. Panics on other ranks; factories only
    /// produce rank-2, so this is an internal invariant.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rank-2 tensor expected");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rank-2 tensor expected");
        self.shape[1]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(TensorError::NotAMatrix {
                op,
                shape: self.shape.clone(),
            })
        }
    }

    /// True when the two tensors have identical shape and bit-identical data.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
