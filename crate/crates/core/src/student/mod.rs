//! The single-image student network and the machinery to train it: tensors,
//! layers with hand-written backward passes, Adam, training and checkpoints.
//!
//! Everything numeric is generic over [`Real`] so the same code runs in
//! `f32` for training and inference and in `f64` for gradient checks.

mod adam;
mod arch;
mod checkpoint;
pub mod layers;
mod network;
mod train;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use arch::{Architecture, Preset, CONV_LAYERS};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    FORMAT_VERSION, MAGIC,
};
pub use network::{
    backward, backward_into, forward, infer, infer_batch, input_tensor, loss, loss_and_grad, loss_grad,
    target_tensor, Activations, ConvLayer, NetworkParams,
};
pub use train::{train, train_from_manifest, TrainConfig, TrainOutcome, TrainSample};

pub trait Real:
    num_traits::Float + AddAssign + SubAssign + MulAssign + Default + Send + Sync + Debug + 'static
{
    fn lift(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn lift(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lift(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor of rank 1 to 4, batch outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!((1..=4).contains(&dims.len()), "tensor rank {} unsupported", dims.len());
        Self {
            dims: dims.to_vec(),
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if !(1..=4).contains(&dims.len()) {
            return Err(Error::argument(format!("tensor rank {} unsupported", dims.len())));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::argument(format!(
                "tensor extents {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::lift(v.as_f64())).collect(),
        }
    }

    /// Index of the first non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}
