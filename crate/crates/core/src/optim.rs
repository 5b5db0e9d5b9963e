//! Heavy-ball SGD with weight decay on filter weights, and piecewise-constant
//! learning-rate schedules.

use std::collections::BTreeMap;

use crate::checkpoint::{Checkpoint, VELOCITY_PREFIX};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    /// `v ← μ·v − lr·(g + λ·w·[decay])`, `w ← w + v`, then clears gradients.
    pub fn step(&mut self, net: &mut Network<T>, lr: f64) {
        let mu = T::from_f64_lossy(self.momentum);
        let lr = T::from_f64_lossy(lr);
        for (name, p) in net.params_mut() {
            let lambda = if p.decay { T::from_f64_lossy(self.weight_decay) } else { T::zero() };
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let (w, g, v) = (p.value.data_mut(), p.grad.data(), v.data_mut());
            for i in 0..w.len() {
                v[i] = mu * v[i] - lr * (g[i] + lambda * w[i]);
                w[i] += v[i];
            }
            p.zero_grad();
        }
    }
}

impl Sgd<f32> {
    pub fn store(&self, ck: &mut Checkpoint) {
        for (name, v) in &self.velocity {
            ck.insert(format!("{VELOCITY_PREFIX}{name}"), v.clone());
        }
        ck.set_meta("opt.momentum", self.momentum);
        ck.set_meta("opt.weight_decay", self.weight_decay);
    }

    pub fn restore(&mut self, ck: &Checkpoint) {
        self.velocity = ck
            .velocities()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
    }
}

/// Contiguous epoch ranges (1-based, inclusive) with a constant rate each.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    segments: Vec<(u32, u32, f64)>,
}

impl Schedule {
    /// Segments must start at epoch 1 and tile the range without gaps.
    pub fn new(segments: Vec<(u32, u32, f64)>) -> Result<Self> {
        let mut next = 1;
        for &(a, b, lr) in &segments {
            if a != next || b < a || !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "schedule segment {a}..={b} @ {lr} breaks contiguity or positivity"
                )));
            }
            next = b + 1;
        }
        if segments.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        Ok(Schedule { segments })
    }

    /// Consecutive blocks of `len` epochs with the given rates.
    pub fn blocks(rates: &[(u32, f64)]) -> Result<Self> {
        let mut start = 1;
        let mut segs = Vec::new();
        for &(len, lr) in rates {
            segs.push((start, start + len - 1, lr));
            start += len;
        }
        Self::new(segs)
    }

    pub fn patch_classifier() -> Self {
        Self::blocks(&[(100, 1e-3), (100, 5e-4), (100, 2.5e-4), (100, 1e-5)]).unwrap()
    }

    pub fn subpatch() -> Self {
        Self::blocks(&[(100, 1e-4), (100, 5e-5), (100, 2.5e-5), (100, 1e-6)]).unwrap()
    }

    pub fn full_patch() -> Self {
        Self::blocks(&[(100, 1e-3), (100, 5e-4), (100, 1e-4), (300, 1e-5)]).unwrap()
    }

    pub fn total_epochs(&self) -> u32 {
        self.segments.last().map(|s| s.1).unwrap_or(0)
    }

    pub fn segments(&self) -> &[(u32, u32, f64)] {
        &self.segments
    }

    pub fn lr(&self, epoch: u32) -> Result<f64> {
        self.segments
            .iter()
            .find(|&&(a, b, _)| (a..=b).contains(&epoch))
            .map(|s| s.2)
            .ok_or_else(|| {
                Error::Config(format!(
                    "epoch {epoch} outside schedule 1..={}",
                    self.total_epochs()
                ))
            })
    }

    /// Same rates with every segment length scaled to fit `total` epochs.
    /// Each segment keeps at least one epoch.
    pub fn compressed(&self, total: u32) -> Result<Self> {
        let n = self.segments.len() as u32;
        if total < n {
            return Err(Error::Config(format!(
                "cannot compress {n} segments into {total} epochs"
            )));
        }
        let old = self.total_epochs() as f64;
        let mut bounds: Vec<u32> = self
            .segments
            .iter()
            .map(|s| ((s.1 as f64) / old * total as f64).round() as u32)
            .collect();
        for i in 0..bounds.len() {
            let lo = if i == 0 { 1 } else { bounds[i - 1] + 1 };
            let hi = total - (n - 1 - i as u32);
            bounds[i] = bounds[i].clamp(lo, hi);
        }
        let mut start = 1;
        let segs = self
            .segments
            .iter()
            .zip(&bounds)
            .map(|(s, &b)| {
                let seg = (start, b, s.2);
                start = b + 1;
                seg
            })
            .collect();
        Self::new(segs)
    }
}
