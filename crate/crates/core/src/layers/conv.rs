//! 2-D convolution via im2col + GEMM.
//!
//! Weights are stored `out_channels × in_channels × kernel × kernel`, so the
//! flattened weight tensor is directly the GEMM left operand.

use super::im2col::{col2im, im2col, transpose_into, Unroll};
use super::{expect_shape, missing_cache, Context, Geometry, Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    /// Stride 1 with the zero padding that keeps the spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("degenerate conv {self:?}")));
        }
        Ok(())
    }

    /// `(n - M + 2z) / s + 1`, rejected unless it is a positive integer.
    pub fn out_size(&self, n: usize) -> Result<usize> {
        self.validate()?;
        let span = n + 2 * self.pad;
        if span < self.kernel {
            return Err(Error::Shape(format!(
                "conv kernel {} larger than padded input {span}",
                self.kernel
            )));
        }
        if (span - self.kernel) % self.stride != 0 {
            return Err(Error::Shape(format!(
                "conv output size ({n} - {} + 2*{}) / {} + 1 is not an integer",
                self.kernel, self.pad, self.stride
            )));
        }
        Ok((span - self.kernel) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
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
            channels: self.in_channels,
            height: input.height,
            width: input.width,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            out_h: output.height,
            out_w: output.width,
        }
    }
}

pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    expect_shape(weight.shape(), spec.weight_shape(), "conv weight")?;
    let out_shape = spec.output_shape(x.shape())?;
    let u = spec.unroll(x.shape(), out_shape);
    let (rows, ncols) = (u.rows(), u.cols());
    let mut y = Tensor::zeros(out_shape);
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..x.shape().batch {
        im2col(x.sample(n), &u, &mut cols);
        let out = y.sample_mut(n);
        for (k, chunk) in out.chunks_mut(ncols).enumerate() {
            let b = bias.data()[k];
            chunk.iter_mut().for_each(|v| *v = b);
        }
        T::gemm(
            spec.out_channels,
            rows,
            ncols,
            T::one(),
            weight.data(),
            (rows as isize, 1),
            &cols,
            (ncols as isize, 1),
            T::one(),
            out,
            (ncols as isize, 1),
        );
    }
    Ok(y)
}

/// Gradients of [`conv_forward`] with respect to input, weight and bias.
pub fn conv_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let out_shape = spec.output_shape(x.shape())?;
    expect_shape(dy.shape(), out_shape, "conv output gradient")?;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(spec.weight_shape());
    let mut db = Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1));
    accumulate_conv_grads(dy, x, weight, spec, Some(&mut dx), &mut dw, &mut db);
    Ok((dx, dw, db))
}

fn accumulate_conv_grads<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    mut dx: Option<&mut Tensor<T>>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) {
    let u = spec.unroll(x.shape(), dy.shape());
    let (rows, ncols) = (u.rows(), u.cols());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dcols = vec![T::zero(); rows * ncols];
    let mut cols_t = vec![T::zero(); rows * ncols];
    for n in 0..x.shape().batch {
        let g = dy.sample(n);
        for (k, chunk) in g.chunks(ncols).enumerate() {
            db.data_mut()[k] += chunk.iter().fold(T::zero(), |a, &v| a + v);
        }
        im2col(x.sample(n), &u, &mut cols);
        // dW += dY · colsᵀ, with colsᵀ materialized row-major: GEMM is much
        // faster when the long reduction axis is contiguous in both operands.
        transpose_into(&cols, rows, ncols, &mut cols_t);
        T::gemm(
            spec.out_channels,
            ncols,
            rows,
            T::one(),
            g,
            (ncols as isize, 1),
            &cols_t,
            (rows as isize, 1),
            T::one(),
            dw.data_mut(),
            (rows as isize, 1),
        );
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = Wᵀ · dY
            T::gemm(
                rows,
                spec.out_channels,
                ncols,
                T::one(),
                weight.data(),
                (1, rows as isize),
                g,
                (ncols as isize, 1),
                T::zero(),
                &mut dcols,
                (ncols as isize, 1),
            );
            col2im(&dcols, &u, dx.sample_mut(n));
        }
    }
}

/// Convolution layer with bias.
#[derive(Clone)]
pub struct Conv2d<T: Scalar> {
    name: String,
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        Conv2d {
            name: name.into(),
            spec,
            weight: Param::new(Tensor::zeros(spec.weight_shape()), true),
            bias: Param::new(Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1)), false),
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "conv"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.spec.output_shape(input)
    }

    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Context<'_>) -> Result<Tensor<T>> {
        let y = conv_forward(x, &self.weight.value, &self.bias.value, &self.spec)?;
        if ctx.cache {
            self.input = Some(x.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("conv"))?;
        expect_shape(dy.shape(), self.spec.output_shape(x.shape())?, "conv output gradient")?;
        let mut dx = Tensor::zeros(x.shape());
        let (mut dw, mut db) = (Tensor::zeros(self.weight.value.shape()), Tensor::zeros(self.bias.value.shape()));
        accumulate_conv_grads(
            dy,
            x,
            &self.weight.value,
            &self.spec,
            Some(&mut dx),
            &mut dw,
            &mut db,
        );
        // Fresh batch gradients, then one add: repeated backward passes
        // accumulate exactly.
        self.weight.grad.add_assign(&dw)?;
        self.bias.grad.add_assign(&db)?;
        Ok(dx)
    }

    fn backward_params(&mut self, dy: &Tensor<T>) -> Result<()> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("conv"))?;
        expect_shape(dy.shape(), self.spec.output_shape(x.shape())?, "conv output gradient")?;
        let (mut dw, mut db) = (Tensor::zeros(self.weight.value.shape()), Tensor::zeros(self.bias.value.shape()));
        accumulate_conv_grads(
            dy,
            x,
            &self.weight.value,
            &self.spec,
            None,
            &mut dw,
            &mut db,
        );
        // Fresh batch gradients, then one add: repeated backward passes
        // accumulate exactly.
        self.weight.grad.add_assign(&dw)?;
        self.bias.grad.add_assign(&db)?;
        Ok(())
    }

    fn geometry(&self) -> Geometry {
        Geometry::Window {
            kernel: self.spec.kernel,
            stride: self.spec.stride,
            pad: self.spec.pad,
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
