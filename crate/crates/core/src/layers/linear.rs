//! Fully connected layer over the flattened per-sample activation.
//!
//! The weight tensor has shape `out × in_channels × in_h × in_w`, i.e. a
//! convolution whose kernel covers the whole input, so flattening follows
//! the tensor layout exactly.

use super::{expect_shape, missing_cache, Context, Geometry, Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FcSpec {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_features: usize,
}

impl FcSpec {
    pub fn in_features(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_features, self.in_channels, self.in_height, self.in_width)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if (input.channels, input.height, input.width)
            != (self.in_channels, self.in_height, self.in_width)
        {
            return Err(Error::Shape(format!(
                "fully connected layer expects {}x{}x{} inputs, got {input}",
                self.in_channels, self.in_height, self.in_width
            )));
        }
        Ok(Shape::new(input.batch, self.out_features, 1, 1))
    }
}

pub fn fc_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &FcSpec,
) -> Result<Tensor<T>> {
    expect_shape(weight.shape(), spec.weight_shape(), "fc weight")?;
    let out_shape = spec.output_shape(x.shape())?;
    let (n, f, o) = (x.shape().batch, spec.in_features(), spec.out_features);
    let mut y = Tensor::zeros(out_shape);
    for row in y.data_mut().chunks_mut(o) {
        row.copy_from_slice(bias.data());
    }
    // Y = X · Wᵀ
    T::gemm(
        n,
        f,
        o,
        T::one(),
        x.data(),
        (f as isize, 1),
        weight.data(),
        (1, f as isize),
        T::one(),
        y.data_mut(),
        (o as isize, 1),
    );
    Ok(y)
}

fn accumulate_fc_grads<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &FcSpec,
    dx: &mut Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) {
    let (n, f, o) = (x.shape().batch, spec.in_features(), spec.out_features);
    // dX = dY · W
    T::gemm(
        n,
        o,
        f,
        T::one(),
        dy.data(),
        (o as isize, 1),
        weight.data(),
        (f as isize, 1),
        T::zero(),
        dx.data_mut(),
        (f as isize, 1),
    );
    // dW += dYᵀ · X
    T::gemm(
        o,
        n,
        f,
        T::one(),
        dy.data(),
        (1, o as isize),
        x.data(),
        (f as isize, 1),
        T::one(),
        dw.data_mut(),
        (f as isize, 1),
    );
    for row in dy.data().chunks(o) {
        for (b, &g) in db.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
}

pub fn fc_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &FcSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    expect_shape(dy.shape(), spec.output_shape(x.shape())?, "fc output gradient")?;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(spec.weight_shape());
    let mut db = Tensor::zeros(Shape::new(1, spec.out_features, 1, 1));
    accumulate_fc_grads(dy, x, weight, spec, &mut dx, &mut dw, &mut db);
    Ok((dx, dw, db))
}

#[derive(Clone)]
pub struct FullyConnected<T: Scalar> {
    name: String,
    pub spec: FcSpec,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> FullyConnected<T> {
    pub fn new(name: impl Into<String>, spec: FcSpec) -> Self {
        FullyConnected {
            name: name.into(),
            spec,
            weight: Param::new(Tensor::zeros(spec.weight_shape()), true),
            bias: Param::new(Tensor::zeros(Shape::new(1, spec.out_features, 1, 1)), false),
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for FullyConnected<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "fc"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.spec.output_shape(input)
    }

    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Context<'_>) -> Result<Tensor<T>> {
        let y = fc_forward(x, &self.weight.value, &self.bias.value, &self.spec)?;
        if ctx.cache {
            self.input = Some(x.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("fc"))?;
        expect_shape(dy.shape(), self.spec.output_shape(x.shape())?, "fc output gradient")?;
        let mut dx = Tensor::zeros(x.shape());
        let (mut dw, mut db) = (Tensor::zeros(self.weight.value.shape()), Tensor::zeros(self.bias.value.shape()));
        accumulate_fc_grads(
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
        Geometry::Global
    }

    fn fan_out(&self) -> Option<usize> {
        Some(self.spec.in_height * self.spec.in_width * self.spec.out_features)
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
