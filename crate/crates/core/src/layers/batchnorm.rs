//! Per-channel batch normalization with learnable scale and shift.
//!
//! Training normalizes with the batch statistics over (batch, height, width)
//! and folds them into exponential moving averages; evaluation uses the
//! moving averages.

use super::{expect_shape, missing_cache, Context, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// What the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct BnCache<T: Scalar> {
    pub mode: Mode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

#[derive(Clone)]
pub struct BatchNorm<T: Scalar> {
    name: String,
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let vec_shape = Shape::new(1, channels, 1, 1);
        BatchNorm {
            name: name.into(),
            channels,
            gamma: Param::new(Tensor::filled(vec_shape, T::one()), false),
            beta: Param::new(Tensor::zeros(vec_shape), false),
            running_mean: Tensor::zeros(vec_shape),
            running_var: Tensor::filled(vec_shape, T::one()),
            momentum: T::from_f64_lossy(DEFAULT_MOMENTUM),
            epsilon: T::from_f64_lossy(DEFAULT_EPSILON),
            cache: None,
        }
    }
}

/// Normalizes `x`. In train mode the running statistics of `bn` are updated.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    bn: &mut BatchNorm<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let s = x.shape();
    if s.channels != bn.channels {
        return Err(Error::Shape(format!(
            "batchnorm expects {} channels, got {}",
            bn.channels, s.channels
        )));
    }
    let count = s.batch * s.plane();
    let p = s.plane();
    let mut y = Tensor::zeros(s);
    let mut xhat = Tensor::zeros(s);
    let mut inv_stds = Vec::with_capacity(s.channels);
    if mode == Mode::Train && count < 2 {
        return Err(Error::Shape(format!(
            "batchnorm training needs >= 2 values per channel, got {count}"
        )));
    }
    let m = T::from_usize(count).unwrap();
    for c in 0..s.channels {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = T::zero();
                for n in 0..s.batch {
                    mean += x.plane(n, c).iter().fold(T::zero(), |a, &v| a + v);
                }
                mean = mean / m;
                let mut var = T::zero();
                for n in 0..s.batch {
                    var += x
                        .plane(n, c)
                        .iter()
                        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean));
                }
                var = var / m;
                let mom = bn.momentum;
                let unbiased = var * m / (m - T::one());
                let rm = &mut bn.running_mean.data_mut()[c];
                *rm = (T::one() - mom) * *rm + mom * mean;
                let rv = &mut bn.running_var.data_mut()[c];
                *rv = (T::one() - mom) * *rv + mom * unbiased;
                (mean, var)
            }
            Mode::Eval => (bn.running_mean.data()[c], bn.running_var.data()[c]),
        };
        let inv_std = T::one() / (var + bn.epsilon).sqrt();
        let (g, b) = (bn.gamma.value.data()[c], bn.beta.value.data()[c]);
        for n in 0..s.batch {
            let start = (n * s.channels + c) * p;
            for i in start..start + p {
                let h = (x.data()[i] - mean) * inv_std;
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + b;
            }
        }
        inv_stds.push(inv_std);
    }
    Ok((
        y,
        BnCache {
            mode,
            xhat,
            inv_std: inv_stds,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`. In train mode the dependence of the batch
/// mean and variance on `x` is included.
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = cache.xhat.shape();
    expect_shape(dy.shape(), s, "batchnorm output gradient")?;
    let p = s.plane();
    let m = T::from_usize(s.batch * p).unwrap();
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(Shape::new(1, s.channels, 1, 1));
    let mut dbeta = Tensor::zeros(Shape::new(1, s.channels, 1, 1));
    for c in 0..s.channels {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.batch {
            let start = (n * s.channels + c) * p;
            for i in start..start + p {
                sum_dy += dy.data()[i];
                sum_dy_xhat += dy.data()[i] * cache.xhat.data()[i];
            }
        }
        dgamma.data_mut()[c] = sum_dy_xhat;
        dbeta.data_mut()[c] = sum_dy;
        let scale = gamma.data()[c] * cache.inv_std[c];
        for n in 0..s.batch {
            let start = (n * s.channels + c) * p;
            for i in start..start + p {
                dx.data_mut()[i] = match cache.mode {
                    Mode::Train => {
                        scale * (dy.data()[i] - sum_dy / m - cache.xhat.data()[i] * sum_dy_xhat / m)
                    }
                    Mode::Eval => scale * dy.data()[i],
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm expects {} channels, got {}",
                self.channels, input.channels
            )));
        }
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Context<'_>) -> Result<Tensor<T>> {
        let (y, cache) = batchnorm_forward(x, self, ctx.mode)?;
        if ctx.cache {
            self.cache = Some(cache);
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("batchnorm"))?;
        let (dx, dgamma, dbeta) = batchnorm_backward(dy, cache, &self.gamma.value)?;
        self.gamma.grad.add_assign(&dgamma)?;
        self.beta.grad.add_assign(&dbeta)?;
        Ok(dx)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("gamma", &mut self.gamma.value),
            ("beta", &mut self.beta.value),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}
