//! Minimal differentiable-array engine.
//!
//! Provides exactly the operations the rest of the crate needs: dense matrix
//! products, per-frame graph convolution steps, 1-D temporal convolution and
//! deconvolution, elementwise nonlinearities, softmax cross-entropy, squared
//! error, parameter storage with reverse-mode gradients, and SGD updates.
//! Everything is dense `f64` in row-major order and runs on the CPU.

mod check;
mod exec;
mod graph;
mod params;

pub use check::finite_diff_check;
pub use exec::{backward, backward_outputs, forward, loss_and_grads, GradMap};
pub use graph::{GraphBuilder, GraphSpec, NodeId, Op, PadMode};
pub use params::{load_checkpoint, save_checkpoint, ModelParams, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Named tensors handed to and returned by graph execution.
pub type TensorMap = BTreeMap<String, Tensor>;

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the value count matches the shape.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "tensor with shape {:?} expects {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], values: vec![v] }
    }

    /// 1-D tensor from a slice.
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { shape: vec![values.len()], values }
    }

    /// 2-D tensor from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch("ragged rows".into()));
            }
            values.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.values[0])
        } else {
            Err(Error::ShapeMismatch(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.values.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_value_count_must_match() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn item_requires_scalar() {
        assert!(Tensor::from_vec(vec![1.0, 2.0]).item().is_err());
        assert_eq!(Tensor::scalar(4.5).item().unwrap(), 4.5);
    }
}
