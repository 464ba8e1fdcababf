//! Dense `f32` tensors with a define-by-run reverse-mode tape.

pub(crate) mod kernels;
mod optim;
mod serialize;
mod tape;

pub use optim::{AdamW, AdamWConfig};
pub use serialize::{read_tensor, write_tensor, TENSOR_MAGIC, TENSOR_VERSION};
pub use tape::{cosine_guard_hits, Gradients, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// A dense, row-major tensor of rank 1 to 4.
///
/// Image tensors use (batch, channel, height, width) order. Scalars are
/// represented with shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape(format!(
            "rank must be between 1 and {MAX_RANK}, got {:?}",
            shape
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a tensor from data produced by a kernel whose shape is already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn ones_like(other: &Tensor) -> Self {
        Self::from_parts(other.shape.clone(), vec![1.0; other.data.len()])
    }

    /// Uniform samples in `[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f32, high: f32, rng: &mut R) -> Result<Self> {
        check_shape(shape)?;
        let data = if low == high {
            vec![low; numel(shape)]
        } else {
            (0..numel(shape)).map(|_| rng.gen_range(low..high)).collect()
        };
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for in-place updates (optimizers, weight loading).
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
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

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::LengthMismatch(g.len(), self.data.len()));
        }
        match self.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
