//! Dense row-major f64 tensors.
//!
//! A `Tensor` owns its data. It is attached to a [`crate::tape::Tape`] when it
//! was produced by (or registered on) one; detached tensors are plain values.

use crate::error::{CoreError, Result};

/// Denominator floor for cosine similarity and normalization. Hitting it is an
/// error, not a silent clamp: a representation or weight vector this small
/// violates the non-triviality assumption the similarity bound rests on.
pub const NORM_FLOOR: f64 = 1e-8;

/// Handle into a specific tape. The `tape_uid` guards against accidentally
/// mixing tensors across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeHandle {
    pub(crate) tape_uid: u64,
    pub(crate) index: usize,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub(crate) data: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) tape_id: Option<NodeHandle>,
}

impl Tensor {
    /// Detached tensor from flat row-major data.
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            data,
            shape,
            requires_grad: false,
            tape_id: None,
        })
    }

    /// Detached 1-D tensor.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            data,
            shape: vec![n],
            requires_grad: false,
            tape_id: None,
        }
    }

    /// Detached scalar (shape `[]`, one element).
    pub fn scalar(value: f64) -> Self {
        Tensor {
            data: vec![value],
            shape: vec![],
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            data: vec![0.0; numel],
            shape: shape.to_vec(),
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape_id(&self) -> Option<NodeHandle> {
        self.tape_id
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }
}
