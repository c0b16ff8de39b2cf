//! Dense f64 tensors, a dynamic reverse-mode tape, and the Adam optimizer.
//!
//! Everything here is single-threaded and deterministic: a tensor or tape may
//! be moved to another thread but is never shared mutably.

mod adam;
mod codec;
pub mod kernels;
mod params;
mod tape;

use rand::Rng;

use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use codec::{decode_param_set, encode_param_set, encoded_header_len};
pub use params::{NamedTensor, ParamSet, Partition, TrainMask};
pub use tape::{AttentionLayout, Grads, Segment, Tape, Var};

/// Row-major dense tensor of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zero-sized dimension")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("zero-sized dimension")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).unwrap()
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    /// Xavier/Glorot uniform initialization for a `[fan_in, fan_out]` matrix.
    pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self::new(vec![rows, cols], data).expect("zero-sized dimension")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows and columns when viewed as a matrix over the last dimension.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    /// Bitwise equality of values, ignoring gradients.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.as_matrix_dims(), (2, 3));
    }

    #[test]
    fn grad_length_checked() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.set_grad(vec![0.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0, 1.0, 1.0][..]));
    }
}
