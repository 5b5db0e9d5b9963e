//! Forward and backward passes for every layer type the architectures use.
//!
//! Each layer kind has a pair of free functions (`*_forward`, `*_backward`)
//! that carry the math, and a stateful [`Layer`] object that owns parameters,
//! gradient accumulators and the per-forward caches the backward pass needs.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod deconv;
pub mod dropout;
pub mod im2col;
pub mod linear;
pub mod loss;
pub mod pool;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Scalar, Shape, Tensor};

pub use activation::LeakyRelu;
pub use batchnorm::BatchNorm;
pub use conv::Conv2d;
pub use deconv::Deconv2d;
pub use dropout::Dropout;
pub use linear::FullyConnected;
pub use pool::{Pool2d, PoolMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies. True only for filter/FC weights.
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Spatial footprint of a layer, used for receptive-field and tiling analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    /// Output `o` reads inputs `o*stride - pad .. o*stride - pad + kernel`.
    Window {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Transposed window: input `i` writes outputs `i*stride - crop .. + kernel`.
    Transposed {
        kernel: usize,
        stride: usize,
        crop: usize,
    },
    /// Collapses the whole spatial extent (fully connected).
    Global,
    /// Per-pixel map.
    Pointwise,
}

/// Everything a forward pass may consume besides its input.
pub struct Context<'a> {
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
    /// Keep what backward needs. Off for pure inference to save memory.
    pub cache: bool,
}

pub trait Layer<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn kind(&self) -> &'static str;

    fn output_shape(&self, input: Shape) -> Result<Shape>;

    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Context<'_>) -> Result<Tensor<T>>;

    /// Returns the input gradient and adds parameter gradients into the
    /// accumulators.
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>>;

    /// Parameter gradients only; layers may skip the input gradient.
    fn backward_params(&mut self, dy: &Tensor<T>) -> Result<()> {
        self.backward(dy).map(|_| ())
    }

    fn geometry(&self) -> Geometry {
        Geometry::Pointwise
    }

    /// `M²·K′` of a filter bank (kernel area times output channels), the
    /// fan used by weight initialization. `None` for layers without filters.
    fn fan_out(&self) -> Option<usize> {
        None
    }

    /// Learnable tensors by local name (`weight`, `bias`, `gamma`, `beta`).
    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        Vec::new()
    }

    /// Non-learnable persistent state (batch-norm running statistics).
    fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        Vec::new()
    }

    /// Parameter values followed by buffers, as one mutable view.
    fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        self.params_mut()
            .into_iter()
            .map(|(n, p)| (n, &mut p.value))
            .collect()
    }

    /// Drops per-forward caches.
    fn clear_cache(&mut self) {}

    fn clone_box(&self) -> Box<dyn Layer<T>>;
}

impl<T: Scalar> Clone for Box<dyn Layer<T>> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

pub(crate) fn missing_cache(kind: &str) -> crate::error::Error {
    crate::error::Error::Shape(format!("{kind} backward called without a forward cache"))
}

pub(crate) fn expect_shape(got: Shape, want: Shape, what: &str) -> Result<()> {
    if got != want {
        return Err(crate::error::Error::Shape(format!(
            "{what}: expected {want}, got {got}"
        )));
    }
    Ok(())
}
