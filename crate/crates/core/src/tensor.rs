//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is immutable after construction; the only mutation the stack
//! performs is gradient accumulation, and that lives on the [`crate::tape::Tape`],
//! not on the tensor. Constructors reject non-finite entries so NaN/Inf can
//! only ever enter a computation through an op bug, which the op kernels
//! check for and surface as errors.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Reference into a tape: which tape (by id) and which node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape,
                detail: format!("shape implies {expected} elements, got {}", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "from_vec",
                index: i,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    /// Internal constructor for op results; finiteness is the op's concern.
    pub(crate) fn internal(shape: Vec<usize>, data: Vec<f64>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }

    pub(crate) fn with_node(&self, node: NodeRef) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: Some(node),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; len]),
            node: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::from_vec(shape, vec![value; len])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::from_vec(vec![1], vec![value])
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::internal(vec![n, n], data, None)
    }

    pub fn random_normal(shape: Vec<usize>, rng: &mut Rng) -> Self {
        let len = shape.iter().product();
        let mut data = vec![0.0; len];
        rng.fill_normal(&mut data);
        Tensor::internal(shape, data, None)
    }

    pub fn random_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let len = shape.iter().product();
        let mut data = vec![0.0; len];
        rng.fill_uniform_in(&mut data, lo, hi);
        Tensor::internal(shape, data, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Whether this tensor participates in gradient propagation.
    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Copy without any tape association.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Row/column view helpers for rank-2 tensors.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::InvalidShape {
                op,
                shape: self.shape.clone(),
                detail: "expected a rank-2 tensor".into(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = (self.shape[0], self.shape[1]);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range at axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                detail: format!("cannot view {} elements", self.data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            node: self.node,
        })
    }

    // ---- pure (untracked) arithmetic; training paths go through the tape ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data.iter().map(|v| v * c).collect();
        Tensor::internal(self.shape.clone(), data, None)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|v| f(*v)).collect();
        Tensor::internal(self.shape.clone(), data, None)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Tensor::internal(self.shape.clone(), data, None))
    }

    pub fn sum_value(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_value(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum_value() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "mean_abs_diff shape mismatch");
        if self.data.is_empty() {
            return 0.0;
        }
        let s: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        s / self.data.len() as f64
    }

    /// Numeric equality (`==` on every element; -0.0 equals 0.0).
    pub fn same_values(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a == b)
    }

    /// Bit-level equality, distinguishing -0.0 from 0.0.
    pub fn same_bits(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Replace one element, returning a fresh untracked tensor.
    pub fn with_element(&self, flat: usize, value: f64) -> Tensor {
        let mut data = self.data.as_ref().clone();
        data[flat] = value;
        Tensor::internal(self.shape.clone(), data, None)
    }
}
