//! Central finite-difference checks of every layer's backward pass in f64.
//!
//! Each case draws a random layer configuration and input, contracts the
//! output with a random weighting `r` (so the scalar is `Σ r ⊙ y`) and
//! compares analytic against numeric gradients of the input and of every
//! parameter on a random subset of coordinates. The error of a tensor is
//! `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::layers::conv::ConvSpec;
use crate::layers::deconv::DeconvSpec;
use crate::layers::dropout::sample_mask;
use crate::layers::linear::FcSpec;
use crate::layers::loss::{softmax_xent, IGNORE};
use crate::layers::pool::PoolSpec;
use crate::layers::{
    BatchNorm, Context, Conv2d, Deconv2d, Dropout, FullyConnected, Geometry, Layer, LeakyRelu, Mode, Param, Pool2d,
    PoolMode,
};
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates checked per tensor and case.
pub const COORDS: usize = 48;

/// Layer kinds covered by the suite.
pub const KINDS: [&str; 9] = ["conv", "deconv", "maxpool", "avgpool", "batchnorm", "lrelu", "dropout", "fc", "softmax_xent"];

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub shape: Shape,
    /// Worst relative error over the input and every parameter.
    pub error: f64,
    /// Tensor with the worst error (`input` or a parameter name).
    pub worst: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KindReport {
    pub kind: String,
    pub cases: Vec<CaseResult>,
}

impl KindReport {
    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.error < tolerance)
    }
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn randn(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.sample(StandardNormal))
}

/// Wraps a layer and returns a deliberately wrong input gradient, as a
/// negative control for the checker.
#[derive(Clone)]
pub struct CorruptBackward {
    pub inner: Box<dyn Layer<f64>>,
}

impl Layer<f64> for CorruptBackward {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.inner.output_shape(input)
    }

    fn forward(&mut self, x: &Tensor<f64>, ctx: &mut Context<'_>) -> Result<Tensor<f64>> {
        self.inner.forward(x, ctx)
    }

    fn backward(&mut self, dy: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.inner.backward(dy)?.scale(1.05))
    }

    fn geometry(&self) -> Geometry {
        self.inner.geometry()
    }

    fn params(&self) -> Vec<(&'static str, &Param<f64>)> {
        self.inner.params()
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<f64>)> {
        self.inner.params_mut()
    }

    fn clear_cache(&mut self) {
        self.inner.clear_cache()
    }

    fn clone_box(&self) -> Box<dyn Layer<f64>> {
        Box::new(self.clone())
    }
}

fn forward(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, cache: bool) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Context { mode: Mode::Train, rng: &mut rng, cache };
    layer.forward(x, &mut ctx)
}

fn objective(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> Result<f64> {
    forward(layer, x, false)?.dot(r)
}

/// Checks one layer on one input.
pub fn check_layer(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    for (_, p) in layer.params_mut() {
        p.zero_grad();
    }
    let y = forward(layer, x, true)?;
    let r = randn(y.shape(), rng);
    let dx = layer.backward(&r)?;
    layer.clear_cache();
    let analytic_params: Vec<(&'static str, Tensor<f64>)> =
        layer.params().into_iter().map(|(n, p)| (n, p.grad.clone())).collect();

    let mut worst = (0.0, "input".to_string());
    let coords = |len: usize, rng: &mut ChaCha8Rng| sample(rng, len, len.min(COORDS)).into_vec();

    let idx = coords(x.len(), rng);
    let mut xp = x.clone();
    let mut numeric = Vec::with_capacity(idx.len());
    for &i in &idx {
        let v = xp.data()[i];
        xp.data_mut()[i] = v + STEP;
        let up = objective(layer, &xp, &r)?;
        xp.data_mut()[i] = v - STEP;
        let down = objective(layer, &xp, &r)?;
        xp.data_mut()[i] = v;
        numeric.push((up - down) / (2.0 * STEP));
    }
    let analytic: Vec<f64> = idx.iter().map(|&i| dx.data()[i]).collect();
    let e = rel_error(&analytic, &numeric);
    if e > worst.0 || e.is_nan() {
        worst = (e, "input".into());
    }

    for (k, (name, grad)) in analytic_params.iter().enumerate() {
        let idx = coords(grad.len(), rng);
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let v = layer.params()[k].1.value.data()[i];
            layer.params_mut()[k].1.value.data_mut()[i] = v + STEP;
            let up = objective(layer, x, &r)?;
            layer.params_mut()[k].1.value.data_mut()[i] = v - STEP;
            let down = objective(layer, x, &r)?;
            layer.params_mut()[k].1.value.data_mut()[i] = v;
            numeric.push((up - down) / (2.0 * STEP));
        }
        let analytic: Vec<f64> = idx.iter().map(|&i| grad.data()[i]).collect();
        let e = rel_error(&analytic, &numeric);
        if e > worst.0 || e.is_nan() {
            worst = (e, (*name).to_string());
        }
    }
    Ok(CaseResult { shape: x.shape(), error: worst.0, worst: worst.1 })
}

/// Checks the gradient of the mean cross-entropy with respect to scores,
/// with some targets ignored.
pub fn check_softmax_xent(rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    let shape = Shape::new(rng.gen_range(1..=3), rng.gen_range(2..=6), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let scores = randn(shape, rng).scale(2.0);
    let mut targets: Vec<u8> =
        (0..shape.batch * shape.plane()).map(|_| rng.gen_range(0..shape.channels) as u8).collect();
    for t in targets.iter_mut() {
        if rng.gen_bool(0.2) {
            *t = IGNORE;
        }
    }
    targets[0] = 0;
    let analytic = softmax_xent(&scores, &targets)?.dscores;
    let mut sp = scores.clone();
    let idx = sample(rng, sp.len(), sp.len().min(COORDS)).into_vec();
    let mut numeric = Vec::new();
    for &i in &idx {
        let v = sp.data()[i];
        sp.data_mut()[i] = v + STEP;
        let up = softmax_xent(&sp, &targets)?.loss;
        sp.data_mut()[i] = v - STEP;
        let down = softmax_xent(&sp, &targets)?.loss;
        sp.data_mut()[i] = v;
        numeric.push((up - down) / (2.0 * STEP));
    }
    let a: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
    Ok(CaseResult { shape, error: rel_error(&a, &numeric), worst: "scores".into() })
}

fn randomize(layer: &mut dyn Layer<f64>, rng: &mut ChaCha8Rng) {
    for (_, p) in layer.params_mut() {
        p.value = randn(p.value.shape(), rng);
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> (usize, usize) {
    (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))
}

/// A random layer of `kind` with a compatible random input.
pub fn random_case(kind: &str, rng: &mut ChaCha8Rng) -> Result<(Box<dyn Layer<f64>>, Tensor<f64>)> {
    let batch = rng.gen_range(1..=2);
    let (layer, shape): (Box<dyn Layer<f64>>, Shape) = match kind {
        "conv" => {
            let kernel = [1, 3, 5, 7][rng.gen_range(0..4)];
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=kernel / 2);
            let spec = ConvSpec { in_channels: rng.gen_range(1..=3), out_channels: rng.gen_range(1..=3), kernel, stride, pad };
            let (oh, ow) = dims(rng, 1, 4);
            let size = |o: usize| (o - 1) * stride + kernel - 2 * pad;
            (Box::new(Conv2d::new("conv", spec)), Shape::new(batch, spec.in_channels, size(oh), size(ow)))
        }
        "deconv" => {
            let kernel = rng.gen_range(1..=4);
            let spec = DeconvSpec {
                in_channels: rng.gen_range(1..=3),
                out_channels: rng.gen_range(1..=3),
                kernel,
                stride: rng.gen_range(1..=2),
                crop: rng.gen_range(0..=(kernel - 1) / 2),
            };
            let (h, w) = dims(rng, 1, 4);
            (Box::new(Deconv2d::new("deconv", spec)), Shape::new(batch, spec.in_channels, h, w))
        }
        "maxpool" | "avgpool" => {
            let window = rng.gen_range(2..=3);
            let spec = PoolSpec {
                window,
                stride: rng.gen_range(1..=2),
                pad: rng.gen_range(0..window),
                mode: if kind == "maxpool" { PoolMode::Max } else { PoolMode::Average },
            };
            let (h, w) = dims(rng, 3, 7);
            (Box::new(Pool2d::new(kind, spec)), Shape::new(batch, rng.gen_range(1..=3), h, w))
        }
        "batchnorm" => {
            let c = rng.gen_range(1..=3);
            let (h, w) = dims(rng, 1, 3);
            (Box::new(BatchNorm::new("bn", c)), Shape::new(rng.gen_range(2..=3), c, h, w))
        }
        "lrelu" => {
            let (h, w) = dims(rng, 1, 5);
            (Box::new(LeakyRelu::new("act", rng.gen_range(0.0..0.5))), Shape::new(batch, rng.gen_range(1..=3), h, w))
        }
        "dropout" => {
            let (h, w) = dims(rng, 1, 5);
            let shape = Shape::new(batch, rng.gen_range(1..=3), h, w);
            let rate = rng.gen_range(0.2..0.7);
            let mut d = Dropout::new("drop", rate);
            d.fix_mask(Some(sample_mask(shape, rate, rng)));
            (Box::new(d), shape)
        }
        "fc" => {
            let (h, w) = dims(rng, 1, 4);
            let spec = FcSpec { in_channels: rng.gen_range(1..=3), in_height: h, in_width: w, out_features: rng.gen_range(1..=5) };
            (Box::new(FullyConnected::new("fc", spec)), Shape::new(batch, spec.in_channels, h, w))
        }
        other => return Err(Error::Config(format!("no gradient check for layer kind `{other}`"))),
    };
    let mut layer = layer;
    randomize(layer.as_mut(), rng);
    let mut x = randn(shape, rng);
    if kind == "lrelu" {
        // Keep inputs off the kink at zero.
        for v in x.data_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05f64.copysign(*v);
            }
        }
    }
    Ok((layer, x))
}

/// Runs `cases` random checks for every kind in `kinds`. Kinds listed in
/// `corrupt` get a wrong backward.
pub fn run_suite(kinds: &[&str], cases: usize, seed: u64, corrupt: &[&str]) -> Result<Vec<KindReport>> {
    if corrupt.contains(&"softmax_xent") {
        return Err(Error::Config("softmax_xent is a loss, not a layer; it cannot be corrupted".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &kind in kinds {
        let mut report = KindReport { kind: kind.to_string(), cases: Vec::new() };
        for _ in 0..cases {
            let case = if kind == "softmax_xent" {
                check_softmax_xent(&mut rng)?
            } else {
                let (layer, x) = random_case(kind, &mut rng)?;
                let mut layer = if corrupt.contains(&kind) { Box::new(CorruptBackward { inner: layer }) } else { layer };
                check_layer(layer.as_mut(), &x, &mut rng)?
            };
            report.cases.push(case);
        }
        out.push(report);
    }
    Ok(out)
}
