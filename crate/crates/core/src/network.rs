//! Sequential layer composition with a named parameter registry.
//!
//! Tensor names are `<layer name>.<local name>`, e.g. `block1.conv.weight`
//! or `deconv2.bn.running_var`. Names are unique across the network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::layers::{Context, Layer, Mode, Param};
use crate::tensor::{Scalar, Shape, Tensor};

pub struct Network<T: Scalar = f32> {
    layers: Vec<Box<dyn Layer<T>>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Network {
            layers: self.layers.clone(),
            mode: self.mode,
            rng: self.rng.clone(),
        }
    }
}

impl<T: Scalar> Default for Network<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Network<T> {
    pub fn new() -> Self {
        Network {
            layers: Vec::new(),
            mode: Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Appends a layer. Layer names must be unique.
    pub fn push(&mut self, layer: impl Layer<T> + 'static) -> Result<()> {
        self.push_boxed(Box::new(layer))
    }

    pub fn push_boxed(&mut self, layer: Box<dyn Layer<T>>) -> Result<()> {
        if self.layers.iter().any(|l| l.name() == layer.name()) {
            return Err(Error::Config(format!("duplicate layer name `{}`", layer.name())));
        }
        self.layers.push(layer);
        Ok(())
    }

    pub fn layers(&self) -> &[Box<dyn Layer<T>>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer<T>>] {
        &mut self.layers
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Box<dyn Layer<T>>> {
        self.layers.iter_mut().find(|l| l.name() == name)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Reseeds the stream that drives dropout masks.
    pub fn seed_dropout(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Output shape of every layer for the given input, in order.
    pub fn shape_chain(&self, input: Shape) -> Result<Vec<(String, Shape)>> {
        let mut s = input;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            s = l.output_shape(s).map_err(|e| e.in_layer(l.name()))?;
            out.push((l.name().to_string(), s));
        }
        Ok(out)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(self
            .shape_chain(input)?
            .last()
            .map(|(_, s)| *s)
            .unwrap_or(input))
    }

    fn run(&mut self, x: &Tensor<T>, cache: bool) -> Result<Tensor<T>> {
        self.output_shape(x.shape())?;
        let mut ctx = Context {
            mode: self.mode,
            rng: &mut self.rng,
            cache,
        };
        let mut cur: Option<Tensor<T>> = None;
        for l in self.layers.iter_mut() {
            let input = cur.as_ref().unwrap_or(x);
            let y = l.forward(input, &mut ctx).map_err(|e| e.in_layer(l.name()))?;
            cur = Some(y);
        }
        Ok(cur.unwrap_or_else(|| x.clone()))
    }

    /// Forward pass that keeps the caches needed by [`backward`](Self::backward).
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, true)
    }

    /// Forward pass without caches, for inference on large inputs.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.run(x, false);
        self.clear_caches();
        out
    }

    /// Backpropagates `dy` through every layer, adding into the parameter
    /// gradient accumulators. Returns the gradient with respect to the input.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = dy.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g).map_err(|e| e.in_layer(l.name()))?;
        }
        Ok(g)
    }

    /// Like [`backward`](Self::backward) but skips the gradient with
    /// respect to the network input.
    pub fn backward_params(&mut self, dy: &Tensor<T>) -> Result<()> {
        let Some((first, rest)) = self.layers.split_first_mut() else {
            return Ok(());
        };
        let mut g = dy.clone();
        for l in rest.iter_mut().rev() {
            g = l.backward(&g).map_err(|e| e.in_layer(l.name()))?;
        }
        first.backward_params(&g).map_err(|e| e.in_layer(first.name()))
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }

    pub fn zero_grad(&mut self) {
        for l in self.layers.iter_mut() {
            for (_, p) in l.params_mut() {
                p.zero_grad();
            }
        }
    }

    /// Learnable tensors in registry order.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (local, p) in l.params() {
                out.push((format!("{}.{local}", l.name()), p));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            let name = l.name().to_string();
            for (local, p) in l.params_mut() {
                out.push((format!("{name}.{local}"), p));
            }
        }
        out
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (local, b) in l.buffers() {
                out.push((format!("{}.{local}", l.name()), b));
            }
        }
        out
    }

    /// Every persistent tensor (parameters, then buffers, per layer) by name.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (local, p) in l.params() {
                out.push((format!("{}.{local}", l.name()), &p.value));
            }
            for (local, b) in l.buffers() {
                out.push((format!("{}.{local}", l.name()), b));
            }
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            let name = l.name().to_string();
            for (local, t) in l.state_mut() {
                out.push((format!("{name}.{local}"), t));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Filter weights drawn from `sqrt(2 / (M²·K′)) · N(0, 1)`; biases zero;
    /// batch-norm scale 1, shift 0, running statistics reset.
    pub fn init_weights(&mut self, rng: &mut impl rand::Rng) {
        for l in self.layers.iter_mut() {
            let fan = l.fan_out();
            for (local, p) in l.params_mut() {
                match local {
                    "weight" => {
                        let std = (2.0 / fan.unwrap_or(1) as f64).sqrt();
                        for v in p.value.data_mut() {
                            let z: f64 = StandardNormal.sample(rng);
                            *v = T::from_f64_lossy(std * z);
                        }
                    }
                    "gamma" => p.value.fill(T::one()),
                    _ => p.value.fill(T::zero()),
                }
                p.zero_grad();
            }
            for (local, b) in l.buffers_mut() {
                b.fill(if local == "running_var" { T::one() } else { T::zero() });
            }
        }
    }

    /// Copies every persistent tensor into a network of another precision
    /// with identical structure.
    pub fn copy_state_from<U: Scalar>(&mut self, other: &Network<U>) -> Result<()> {
        let src = other.state();
        let dst = self.state_mut();
        if src.len() != dst.len() {
            return Err(Error::Config("networks differ in structure".into()));
        }
        for ((sn, s), (dn, d)) in src.into_iter().zip(dst) {
            if sn != dn || s.shape() != d.shape() {
                return Err(Error::Config(format!("state mismatch at `{dn}`")));
            }
            *d = s.cast();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::conv::ConvSpec;
    use crate::layers::{BatchNorm, Conv2d, LeakyRelu};

    fn toy() -> Network<f64> {
        let mut net = Network::new();
        net.push(Conv2d::new("c1", ConvSpec::same(2, 3, 3))).unwrap();
        net.push(BatchNorm::new("bn", 3)).unwrap();
        net.push(LeakyRelu::new("act", 0.1)).unwrap();
        net
    }

    #[test]
    fn registry_names() {
        let net = toy();
        let names: Vec<String> = net.state().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            vec!["c1.weight", "c1.bias", "bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var"]
        );
        assert!(net.params().iter().filter(|(_, p)| p.decay).map(|(n, _)| n.as_str()).eq(["c1.weight"]));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut net = toy();
        assert!(net.push(LeakyRelu::new("act", 0.1)).is_err());
    }

    #[test]
    fn shape_error_names_layer() {
        let mut net = toy();
        let err = net.forward(&Tensor::zeros(Shape::new(1, 5, 4, 4))).unwrap_err();
        assert!(err.to_string().contains("c1"), "{err}");
    }

    #[test]
    fn init_rule() {
        let mut net = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        net.init_weights(&mut rng);
        let params = net.params();
        assert!(params[1].1.value.data().iter().all(|&b| b == 0.0));
        assert!(params[2].1.value.data().iter().all(|&g| g == 1.0));
    }
}
