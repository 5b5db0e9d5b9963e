//! Inverted dropout: survivors are scaled by `1 / (1 - rate)` at training
//! time, so evaluation is the identity.

use rand::Rng;

use super::{expect_shape, missing_cache, Context, Layer, Mode};
use crate::error::Result;
use crate::tensor::{Scalar, Shape, Tensor};

/// Draws a fresh mask: each entry is `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn sample_mask<T: Scalar>(shape: Shape, rate: f64, rng: &mut impl Rng) -> Tensor<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mut m = Tensor::zeros(shape);
    for v in m.data_mut() {
        *v = if rng.gen::<f64>() < rate { T::zero() } else { keep };
    }
    m
}

pub fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> (Tensor<T>, Option<Tensor<T>>) {
    if mode == Mode::Eval || rate == 0.0 {
        return (x.clone(), None);
    }
    let mask = sample_mask(x.shape(), rate, rng);
    let y = x.mul(&mask).expect("mask shares the input shape");
    (y, Some(mask))
}

pub fn dropout_backward<T: Scalar>(dy: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(dy.clone()),
        Some(m) => {
            expect_shape(dy.shape(), m.shape(), "dropout gradient")?;
            dy.mul(m)
        }
    }
}

#[derive(Clone)]
pub struct Dropout<T: Scalar> {
    name: String,
    pub rate: f64,
    /// When set, train-mode forwards reuse this mask instead of sampling.
    fixed_mask: Option<Tensor<T>>,
    mask: Option<Option<Tensor<T>>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(name: impl Into<String>, rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        Dropout {
            name: name.into(),
            rate,
            fixed_mask: None,
            mask: None,
        }
    }

    pub fn fix_mask(&mut self, mask: Option<Tensor<T>>) {
        self.fixed_mask = mask;
    }

    /// Mask used by the most recent cached forward (None means identity).
    pub fn last_mask(&self) -> Option<&Tensor<T>> {
        self.mask.as_ref().and_then(|m| m.as_ref())
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Context<'_>) -> Result<Tensor<T>> {
        let (y, mask) = match (&self.fixed_mask, ctx.mode) {
            (Some(m), Mode::Train) => {
                expect_shape(m.shape(), x.shape(), "fixed dropout mask")?;
                (x.mul(m)?, Some(m.clone()))
            }
            _ => dropout_forward(x, self.rate, ctx.mode, ctx.rng),
        };
        if ctx.cache {
            self.mask = Some(mask);
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.as_ref().ok_or_else(|| missing_cache("dropout"))?;
        dropout_backward(dy, mask.as_ref())
    }

    fn clear_cache(&mut self) {
        self.mask = None;
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}
