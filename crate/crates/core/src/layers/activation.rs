use super::{expect_shape, missing_cache, Context, Layer};
use crate::error::Result;
use crate::tensor::{Scalar, Shape, Tensor};

/// `x` for `x >= 0`, `tau * x` otherwise.
pub fn leaky_relu_forward<T: Scalar>(x: &Tensor<T>, tau: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { tau * v })
}

/// Gate is 1 on the non-negative branch (including 0), `tau` below it.
pub fn leaky_relu_backward<T: Scalar>(dy: &Tensor<T>, x: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    expect_shape(dy.shape(), x.shape(), "leaky relu gradient")?;
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v >= T::zero() { g } else { tau * g })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[derive(Clone)]
pub struct LeakyRelu<T: Scalar> {
    name: String,
    pub tau: T,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(name: impl Into<String>, tau: T) -> Self {
        assert!(tau >= T::zero() && tau < T::one(), "leak must lie in [0, 1)");
        LeakyRelu {
            name: name.into(),
            tau,
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for LeakyRelu<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "lrelu"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Context<'_>) -> Result<Tensor<T>> {
        if ctx.cache {
            self.input = Some(x.clone());
        }
        Ok(leaky_relu_forward(x, self.tau))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("lrelu"))?;
        leaky_relu_backward(dy, x, self.tau)
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branches() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 3), vec![2.0, -2.0, 0.0]).unwrap();
        let y = leaky_relu_forward(&x, 0.1);
        assert_eq!(y.data()[0], 2.0);
        assert!((y.data()[1] + 0.2).abs() < 1e-7);
        assert_eq!(y.data()[2], 0.0);
        let g = leaky_relu_backward(&Tensor::filled(x.shape(), 1.0), &x, 0.1).unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.data()[1], 0.1);
        assert_eq!(g.data()[2], 1.0);
    }
}
