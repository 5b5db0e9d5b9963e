//! Rasters, datasets, sampling and augmentation.

pub mod augment;
pub mod io;
pub mod palette;
pub mod sampler;
pub mod synth;

use crate::error::{Error, Result};
use crate::layers::loss::IGNORE;
use crate::tensor::{Shape, Tensor};

pub use augment::{rotate_tile, rotate_tiles};
pub use sampler::{
    draw_minibatch, grid_starts, grid_superbatch, sample_superbatch, Minibatch, PatchRef, PatchStore,
    SamplerConfig,
};

/// A co-registered raster stack: `K` input channels and one label per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub id: String,
    /// `1 × K × H × W`.
    pub spectral: Tensor<f32>,
    /// `H × W` class indices, [`IGNORE`] where unlabeled.
    pub labels: Vec<u8>,
}

impl Tile {
    pub fn new(id: impl Into<String>, spectral: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        let s = spectral.shape();
        let id = id.into();
        if s.batch != 1 || labels.len() != s.plane() {
            return Err(Error::Data(format!(
                "tile `{id}`: spectral {s} does not match {} labels",
                labels.len()
            )));
        }
        Ok(Tile { id, spectral, labels })
    }

    pub fn height(&self) -> usize {
        self.spectral.shape().height
    }

    pub fn width(&self) -> usize {
        self.spectral.shape().width
    }

    pub fn channels(&self) -> usize {
        self.spectral.shape().channels
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width() + x]
    }
}

/// Per-channel affine map `v ↦ (v - min) / (max - min)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelRange {
    pub min: f32,
    pub max: f32,
}

impl ChannelRange {
    pub const UNIT: ChannelRange = ChannelRange { min: 0.0, max: 1.0 };

    pub fn apply(&self, v: f32) -> f32 {
        let span = self.max - self.min;
        if span > 0.0 {
            ((v - self.min) / span).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Tile>,
    pub val: Vec<Tile>,
    pub classes: usize,
    /// Per-channel mean of the training tiles after scaling to `[0, 1]`.
    pub mean: Vec<f32>,
    /// Index of the height channel, if any.
    pub height_channel: Option<usize>,
}

impl Dataset {
    pub fn new(train: Vec<Tile>, val: Vec<Tile>, classes: usize, height_channel: Option<usize>) -> Result<Self> {
        let k = train
            .first()
            .ok_or_else(|| Error::Data("dataset has no training tiles".into()))?
            .channels();
        for t in train.iter().chain(&val) {
            if t.channels() != k {
                return Err(Error::Data(format!("tile `{}` has {} channels, expected {k}", t.id, t.channels())));
            }
            if let Some(&bad) = t.labels.iter().find(|&&l| l != IGNORE && l as usize >= classes) {
                return Err(Error::Data(format!("tile `{}` has label {bad} >= {classes}", t.id)));
            }
        }
        if let Some(t) = val.iter().find(|v| train.iter().any(|t| t.id == v.id)) {
            return Err(Error::Data(format!("tile `{}` is in both splits", t.id)));
        }
        let mut ds = Dataset { train, val, classes, mean: vec![0.0; k], height_channel };
        ds.mean = channel_means(&ds.train);
        Ok(ds)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Pixel counts per class over the training tiles.
    pub fn class_frequencies(&self) -> Vec<u64> {
        class_histogram(&self.train, self.classes)
    }
}

pub fn class_histogram(tiles: &[Tile], classes: usize) -> Vec<u64> {
    let mut h = vec![0u64; classes];
    for t in tiles {
        for &l in &t.labels {
            if (l as usize) < classes {
                h[l as usize] += 1;
            }
        }
    }
    h
}

/// Mean of every channel over all pixels of `tiles` (f64 accumulation).
pub fn channel_means(tiles: &[Tile]) -> Vec<f32> {
    let k = tiles.first().map(|t| t.channels()).unwrap_or(0);
    let mut sum = vec![0f64; k];
    let mut n = 0usize;
    for t in tiles {
        for (c, s) in sum.iter_mut().enumerate() {
            *s += t.spectral.plane(0, c).iter().map(|&v| v as f64).sum::<f64>();
        }
        n += t.height() * t.width();
    }
    sum.iter().map(|s| (s / n.max(1) as f64) as f32).collect()
}

/// Global min/max of channel `c` over `tiles`.
pub fn channel_range(tiles: &[Tile], c: usize) -> ChannelRange {
    let mut r = ChannelRange { min: f32::INFINITY, max: f32::NEG_INFINITY };
    for t in tiles {
        for &v in t.spectral.plane(0, c) {
            r.min = r.min.min(v);
            r.max = r.max.max(v);
        }
    }
    r
}

/// Rescales channel `c` of every tile with `range`.
pub fn apply_range(tiles: &mut [Tile], c: usize, range: ChannelRange) {
    for t in tiles {
        t.spectral.plane_mut(0, c).iter_mut().for_each(|v| *v = range.apply(*v));
    }
}

/// Normalizes the height channel by the training min/max (applied to both
/// splits) and recomputes the training mean. Returns the range used.
pub fn normalize(ds: &mut Dataset) -> Option<ChannelRange> {
    let c = ds.height_channel?;
    let range = channel_range(&ds.train, c);
    apply_range(&mut ds.train, c, range);
    apply_range(&mut ds.val, c, range);
    ds.mean = channel_means(&ds.train);
    Some(range)
}

/// Everything needed to bring a raw raster into network input space:
/// height rescaling, then training-mean subtraction.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessing {
    pub mean: Vec<f32>,
    pub height_channel: Option<usize>,
    pub height_range: Option<ChannelRange>,
}

impl Preprocessing {
    pub fn from_dataset(ds: &Dataset, height_range: Option<ChannelRange>) -> Self {
        Preprocessing { mean: ds.mean.clone(), height_channel: ds.height_channel, height_range }
    }

    /// Rescales the height channel of a raw `N × K × H × W` image and
    /// subtracts the mean.
    pub fn apply_raw(&self, image: &mut Tensor<f32>) -> Result<()> {
        if let (Some(c), Some(r)) = (self.height_channel, self.height_range) {
            for n in 0..image.shape().batch {
                if c < image.shape().channels {
                    image.plane_mut(n, c).iter_mut().for_each(|v| *v = r.apply(*v));
                }
            }
        }
        self.center(image)
    }

    /// Subtracts the mean from an already rescaled image.
    pub fn center(&self, image: &mut Tensor<f32>) -> Result<()> {
        let s = image.shape();
        if s.channels != self.mean.len() {
            return Err(Error::Data(format!("image has {} channels, network expects {}", s.channels, self.mean.len())));
        }
        for n in 0..s.batch {
            for (c, &m) in self.mean.iter().enumerate() {
                image.plane_mut(n, c).iter_mut().for_each(|v| *v -= m);
            }
        }
        Ok(())
    }
}

/// Zero-filled `1 × K × H × W` spectral tensor.
pub fn blank_spectral(k: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::zeros(Shape::new(1, k, h, w))
}
