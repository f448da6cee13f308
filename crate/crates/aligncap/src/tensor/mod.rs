//! Dense f64 tensor substrate: storage, seeded init, tape autodiff, gradient checking.

pub mod check;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tape;

pub use check::{finite_diff_check, finite_diff_check_params, max_rel_error};
pub use param::{Init, Parameter};
pub use rng::Rng;
pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};

/// Row-major n-dimensional array of 64-bit floats.
///
/// Immutable once built except for `grad`, which a tape fills after backward.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::EmptyDimension("tensor shape"));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: format!("{shape:?}"),
                rhs: format!("data len {}", data.len()),
            });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// Entries drawn i.i.d. from U(lo, hi).
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.range(lo, hi)).collect();
        Self { shape, data, requires_grad: false, grad: None }
    }

    /// Identity matrix [n, n].
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar { op: "Tensor::item", shape: format!("{:?}", self.shape) })
        }
    }

    /// (rows, cols) of a rank-2 tensor; rank-1 of length d reads as (1, d).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [d] => Ok((1, *d)),
            _ => Err(Error::ShapeMismatch {
                op: "dims2",
                lhs: format!("{:?}", self.shape),
                rhs: "rank 1 or 2".into(),
            }),
        }
    }
}
