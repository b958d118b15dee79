//! Dense-tensor numerics with reverse-mode automatic differentiation,
//! sufficient to train the model end to end on a CPU.

pub mod gradcheck;
pub mod optim;
pub mod scalar;
pub mod tape;

pub use optim::{AdamWConfig, OptimizerState};
pub use scalar::Scalar;
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};

/// A host-side parameter or buffer: contiguous values plus an optional
/// gradient of identical shape.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} does not match value count {}", shape, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::ZERO; n], grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulate a gradient buffer coming back from a tape.
    pub fn accumulate_grad(&mut self, g: &[S]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (dst, &x) in buf.iter_mut().zip(g) {
                    *dst += x;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn map_scalar<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.to_f64())).collect(),
            grad: None,
        }
    }
}
