//! Dense row-major f64 tensors.
//!
//! `Tensor` is the plain value type: parameters, images, gradients. It
//! never references a tape; tapes copy tensor data in when a value joins
//! a computation (see [`crate::autodiff::Tape::leaf`]) and gradients are
//! read back out after `backward`.

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major, f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Whether a tape should track gradients for this value when bound.
    pub requires_grad: bool,
    /// Gradient buffer, same shape as `data` when present.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Tensor from shape and data. Fails unless `data.len() == product(shape)`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("data length {} != shape product {}", data.len(), numel),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(xs: &[f64]) -> Self {
        Tensor {
            shape: vec![xs.len()],
            data: xs.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Mark as gradient-tracked and return self (builder style).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidShape {
                op: "Tensor::item",
                shape: self.shape.clone(),
                reason: "expected exactly one element".into(),
            })
        }
    }

    /// Maximum absolute entry (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
