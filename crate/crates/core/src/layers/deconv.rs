//! Transposed convolution: the linear adjoint of [`conv_forward`](super::conv::conv_forward)
//! with the same kernel, stride and padding, plus a per-output-channel bias.
//!
//! Weights are stored `in_channels × out_channels × kernel × kernel`, which
//! is exactly the weight tensor of the convolution this layer transposes.
//! Forward is col2im of `Wᵀ·x`; the input gradient is an ordinary
//! convolution of the output gradient.

use super::im2col::{col2im, im2col, transpose_into, Unroll};
use super::{expect_shape, missing_cache, Context, Geometry, Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Rows/columns cropped from each border of the full transposed output.
    pub crop: usize,
}

impl DeconvSpec {
    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.in_channels, self.out_channels, self.kernel, self.kernel)
    }

    /// `(n - 1)·s - 2z + M`.
    pub fn out_size(&self, n: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 || n == 0 {
            return Err(Error::Config(format!("degenerate deconv {self:?} on {n}")));
        }
        let full = (n - 1) * self.stride + self.kernel;
        if full <= 2 * self.crop {
            return Err(Error::Shape(format!(
                "deconv crop {} leaves no output from input {n}",
                self.crop
            )));
        }
        Ok(full - 2 * self.crop)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "deconv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        Ok(Shape::new(
            input.batch,
            self.out_channels,
            self.out_size(input.height)?,
            self.out_size(input.width)?,
        ))
    }

    fn unroll(&self, input: Shape, output: Shape) -> Unroll {
        Unroll {
            channels: self.out_channels,
            height: output.height,
            width: output.width,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.crop,
            out_h: input.height,
            out_w: input.width,
        }
    }
}

pub fn deconv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &DeconvSpec,
) -> Result<Tensor<T>> {
    expect_shape(weight.shape(), spec.weight_shape(), "deconv weight")?;
    let out_shape = spec.output_shape(x.shape())?;
    let u = spec.unroll(x.shape(), out_shape);
    let (rows, ncols) = (u.rows(), u.cols());
    let mut y = Tensor::zeros(out_shape);
    let mut cols = vec![T::zero(); rows * ncols];
    let plane = out_shape.plane();
    for n in 0..x.shape().batch {
        // cols = Wᵀ · x
        T::gemm(
            rows,
            spec.in_channels,
            ncols,
            T::one(),
            weight.data(),
            (1, rows as isize),
            x.sample(n),
            (ncols as isize, 1),
            T::zero(),
            &mut cols,
            (ncols as isize, 1),
        );
        let out = y.sample_mut(n);
        col2im(&cols, &u, out);
        for (k, chunk) in out.chunks_mut(plane).enumerate() {
            let b = bias.data()[k];
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(y)
}

pub fn deconv_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &DeconvSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    expect_shape(dy.shape(), spec.output_shape(x.shape())?, "deconv output gradient")?;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(spec.weight_shape());
    let mut db = Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1));
    accumulate_deconv_grads(dy, x, weight, spec, &mut dx, &mut dw, &mut db);
    Ok((dx, dw, db))
}

fn accumulate_deconv_grads<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &DeconvSpec,
    dx: &mut Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) {
    let u = spec.unroll(x.shape(), dy.shape());
    let (rows, ncols) = (u.rows(), u.cols());
    let plane = dy.shape().plane();
    let mut dcols = vec![T::zero(); rows * ncols];
    let mut dcols_t = vec![T::zero(); rows * ncols];
    for n in 0..x.shape().batch {
        let g = dy.sample(n);
        for (k, chunk) in g.chunks(plane).enumerate() {
            db.data_mut()[k] += chunk.iter().fold(T::zero(), |a, &v| a + v);
        }
        im2col(g, &u, &mut dcols);
        // dx = W · dcols
        T::gemm(
            spec.in_channels,
            rows,
            ncols,
            T::one(),
            weight.data(),
            (rows as isize, 1),
            &dcols,
            (ncols as isize, 1),
            T::zero(),
            dx.sample_mut(n),
            (ncols as isize, 1),
        );
        // dW += x · dcolsᵀ, with dcolsᵀ materialized row-major.
        transpose_into(&dcols, rows, ncols, &mut dcols_t);
        T::gemm(
            spec.in_channels,
            ncols,
            rows,
            T::one(),
            x.sample(n),
            (ncols as isize, 1),
            &dcols_t,
            (rows as isize, 1),
            T::one(),
            dw.data_mut(),
            (rows as isize, 1),
        );
    }
}

#[derive(Clone)]
pub struct Deconv2d<T: Scalar> {
    name: String,
    pub spec: DeconvSpec,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Deconv2d<T> {
    pub fn new(name: impl Into<String>, spec: DeconvSpec) -> Self {
        Deconv2d {
            name: name.into(),
            spec,
            weight: Param::new(Tensor::zeros(spec.weight_shape()), true),
            bias: Param::new(Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1)), false),
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Deconv2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "deconv"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.spec.output_shape(input)
    }

    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Context<'_>) -> Result<Tensor<T>> {
        let y = deconv_forward(x, &self.weight.value, &self.bias.value, &self.spec)?;
        if ctx.cache {
            self.input = Some(x.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("deconv"))?;
        expect_shape(dy.shape(), self.spec.output_shape(x.shape())?, "deconv output gradient")?;
        let mut dx = Tensor::zeros(x.shape());
        let (mut dw, mut db) = (Tensor::zeros(self.weight.value.shape()), Tensor::zeros(self.bias.value.shape()));
        accumulate_deconv_grads(
            dy,
            x,
            &self.weight.value,
            &self.spec,
            &mut dx,
            &mut dw,
            &mut db,
        );
        // Fresh batch gradients, then one add: repeated backward passes
        // accumulate exactly.
        self.weight.grad.add_assign(&dw)?;
        self.bias.grad.add_assign(&db)?;
        Ok(dx)
    }

    fn geometry(&self) -> Geometry {
        Geometry::Transposed {
            kernel: self.spec.kernel,
            stride: self.spec.stride,
            crop: self.spec.crop,
        }
    }

    fn fan_out(&self) -> Option<usize> {
        Some(self.spec.kernel * self.spec.kernel * self.spec.out_channels)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}
