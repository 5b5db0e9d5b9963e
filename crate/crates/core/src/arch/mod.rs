//! Network architectures behind one trait, selected by tag at runtime.
//!
//! Every architecture shares the same downsampling blocks
//! (`block1`..`block4`, each conv → bn → leaky ReLU → max-pool → dropout),
//! so tensors of the common blocks carry identical names across tags.

mod fpl;
mod pc;
mod spl;

use crate::error::{Error, Result};
use crate::inference::PredictOptions;
use crate::layers::conv::ConvSpec;
use crate::layers::deconv::DeconvSpec;
use crate::layers::linear::FcSpec;
use crate::layers::pool::PoolSpec;
use crate::layers::{
    BatchNorm, Conv2d, Deconv2d, Dropout, FullyConnected, Geometry, Layer, LeakyRelu, Pool2d,
    PoolMode,
};
use crate::network::Network;
use crate::optim::Schedule;
use crate::tensor::{Scalar, Shape, Tensor};

pub use fpl::FullPatch;
pub use pc::PatchClassifier;
pub use spl::SubPatch;

/// Filter counts of the four downsampling convolutions.
pub const BLOCK_WIDTHS: [usize; 4] = [64, 64, 128, 256];
pub const BLOCK_KERNELS: [usize; 4] = [7, 5, 5, 5];
pub const DECONV_WIDTH: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub tag: String,
    pub in_channels: usize,
    pub classes: usize,
    pub patch: usize,
    /// Divides every hidden width. 1 is the published network; larger
    /// values give cheaper networks of identical topology.
    pub width_divisor: usize,
    pub dropout: f64,
    pub tau: f64,
    /// Dropout position inside a block: after pooling (default) or before.
    pub dropout_before_pool: bool,
}

impl ArchSpec {
    pub fn new(tag: &str, in_channels: usize, classes: usize) -> Self {
        ArchSpec {
            tag: tag.to_string(),
            in_channels,
            classes,
            patch: 65,
            width_divisor: 1,
            dropout: 0.5,
            tau: 0.1,
            dropout_before_pool: false,
        }
    }

    pub fn width(&self, full: usize) -> usize {
        (full / self.width_divisor.max(1)).max(1)
    }

    pub fn architecture(&self) -> Result<&'static dyn Architecture> {
        lookup(&self.tag)
    }

    pub fn validate(&self) -> Result<()> {
        lookup(&self.tag)?;
        if self.in_channels == 0 || self.classes < 2 || self.width_divisor == 0 {
            return Err(Error::Config(format!(
                "need in_channels >= 1, classes >= 2, width_divisor >= 1 (got {self:?})"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config("dropout and tau must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn build<T: Scalar>(&self) -> Result<Network<T>> {
        self.validate()?;
        let plan = self.architecture()?.plan(self)?;
        let mut net = Network::new();
        for step in plan {
            net.push_boxed(step.instantiate(self.tau))?;
        }
        net.shape_chain(self.patch_shape(1))?;
        Ok(net)
    }

    pub fn patch_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.in_channels, self.patch, self.patch)
    }

    /// Spatial size after every layer that changes it, starting with the input.
    pub fn spatial_chain(&self) -> Result<Vec<usize>> {
        let net: Network<f32> = self.build()?;
        let mut chain = vec![self.patch];
        for (_, s) in net.shape_chain(self.patch_shape(1))? {
            if s.height != *chain.last().unwrap() {
                chain.push(s.height);
            }
        }
        Ok(chain)
    }

    /// Learnable element counts per tensor name, in registry order.
    pub fn param_counts(&self) -> Result<Vec<(String, usize)>> {
        let net: Network<f32> = self.build()?;
        Ok(net
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.value.len()))
            .collect())
    }

    pub fn output_shape(&self, batch: usize) -> Result<Shape> {
        let net: Network<f32> = self.build()?;
        net.output_shape(self.patch_shape(batch))
    }
}

/// One layer of a plan, independent of numeric precision.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerPlan {
    Conv(String, ConvSpec),
    BatchNorm(String, usize),
    Act(String),
    Pool(String, PoolSpec),
    Dropout(String, f64),
    Deconv(String, DeconvSpec),
    Fc(String, FcSpec),
}

impl LayerPlan {
    fn instantiate<T: Scalar>(self, tau: f64) -> Box<dyn Layer<T>> {
        match self {
            LayerPlan::Conv(n, s) => Box::new(Conv2d::new(n, s)),
            LayerPlan::BatchNorm(n, c) => Box::new(BatchNorm::new(n, c)),
            LayerPlan::Act(n) => Box::new(LeakyRelu::new(n, T::from_f64_lossy(tau))),
            LayerPlan::Pool(n, s) => Box::new(Pool2d::new(n, s)),
            LayerPlan::Dropout(n, r) => Box::new(Dropout::new(n, r)),
            LayerPlan::Deconv(n, s) => Box::new(Deconv2d::new(n, s)),
            LayerPlan::Fc(n, s) => Box::new(FullyConnected::new(n, s)),
        }
    }
}

/// The four downsampling blocks. `pool4` controls whether the last block
/// pools. Returns the plan and the channel count of the last block.
pub(crate) fn downsampling_blocks(spec: &ArchSpec, pool4: bool) -> (Vec<LayerPlan>, usize) {
    let mut plan = Vec::new();
    let mut cin = spec.in_channels;
    for (i, (&w, &k)) in BLOCK_WIDTHS.iter().zip(&BLOCK_KERNELS).enumerate() {
        let b = i + 1;
        let cout = spec.width(w);
        plan.push(LayerPlan::Conv(format!("block{b}.conv"), ConvSpec::same(cin, cout, k)));
        plan.push(LayerPlan::BatchNorm(format!("block{b}.bn"), cout));
        plan.push(LayerPlan::Act(format!("block{b}.act")));
        let drop = LayerPlan::Dropout(format!("block{b}.drop"), spec.dropout);
        let pool = (b < 4 || pool4)
            .then(|| LayerPlan::Pool(format!("block{b}.pool"), PoolSpec::downsample(PoolMode::Max)));
        if spec.dropout_before_pool {
            plan.push(drop);
            plan.extend(pool);
        } else {
            plan.extend(pool);
            plan.push(drop);
        }
        cin = cout;
    }
    (plan, cin)
}

/// A network family: how to build it, what it is trained against and how
/// it produces dense maps.
pub trait Architecture: Send + Sync {
    fn tag(&self) -> &'static str;

    fn description(&self) -> &'static str;

    fn plan(&self, spec: &ArchSpec) -> Result<Vec<LayerPlan>>;

    fn default_schedule(&self) -> Schedule;

    fn batch_size(&self) -> usize;

    /// `(network prefix, checkpoint prefix)` pairs for warm-starting from a
    /// checkpoint of architecture `source`. Empty when nothing transfers.
    fn warm_start_map(&self, source: &str) -> Vec<(String, String)> {
        if source == "pc" && self.tag() != "pc" {
            (1..=4)
                .map(|b| (format!("block{b}."), format!("block{b}.")))
                .collect()
        } else {
            Vec::new()
        }
    }

    /// Per-output-pixel targets for a batch of label patches (`n × patch²`,
    /// row-major). An `out × out` output samples the patch on the lattice
    /// `i · (patch - 1) / (out - 1)`; a 1×1 output takes the central pixel.
    fn targets(&self, labels: &[u8], patch: usize, out: usize) -> Result<Vec<u8>> {
        lattice_targets(labels, patch, out)
    }

    /// Class-probability map with the spatial size of `image` (`1 × K × H × W`).
    fn predict(
        &self,
        net: &mut Network<f32>,
        spec: &ArchSpec,
        image: &Tensor<f32>,
        opts: &PredictOptions,
    ) -> Result<Tensor<f32>>;
}

pub fn lattice_targets(labels: &[u8], patch: usize, out: usize) -> Result<Vec<u8>> {
    let p2 = patch * patch;
    if p2 == 0 || labels.len() % p2 != 0 {
        return Err(Error::Shape(format!(
            "{} labels is not a whole number of {patch}x{patch} patches",
            labels.len()
        )));
    }
    let (offset, step) = match out {
        1 => (patch / 2, 0),
        _ if (patch - 1) % (out - 1) == 0 => (0, (patch - 1) / (out - 1)),
        _ => {
            return Err(Error::Shape(format!(
                "output {out} does not sit on a lattice of patch {patch}"
            )))
        }
    };
    let mut t = Vec::with_capacity(labels.len() / p2 * out * out);
    for patch_labels in labels.chunks(p2) {
        for i in 0..out {
            for j in 0..out {
                t.push(patch_labels[(offset + i * step) * patch + offset + j * step]);
            }
        }
    }
    Ok(t)
}

static REGISTRY: [&dyn Architecture; 3] = [&PatchClassifier, &SubPatch, &FullPatch];

pub fn registry() -> &'static [&'static dyn Architecture] {
    &REGISTRY
}

pub fn lookup(tag: &str) -> Result<&'static dyn Architecture> {
    let t = tag.to_ascii_lowercase();
    REGISTRY
        .iter()
        .copied()
        .find(|a| a.tag() == t)
        .ok_or_else(|| Error::UnknownArch(tag.to_string()))
}

/// Input interval (inclusive, unclamped) that can influence outputs `a..=b`
/// of the first `upto` layers along one axis. `None` when a layer mixes the
/// whole spatial extent.
pub fn input_interval<T: Scalar>(
    layers: &[Box<dyn Layer<T>>],
    upto: usize,
    a: isize,
    b: isize,
) -> Option<(isize, isize)> {
    let (mut lo, mut hi) = (a, b);
    for l in layers[..upto].iter().rev() {
        match l.geometry() {
            Geometry::Pointwise => {}
            Geometry::Global => return None,
            Geometry::Window { kernel, stride, pad } => {
                let (k, s, p) = (kernel as isize, stride as isize, pad as isize);
                lo = lo * s - p;
                hi = hi * s - p + k - 1;
            }
            Geometry::Transposed { kernel, stride, crop } => {
                let (k, s, c) = (kernel as isize, stride as isize, crop as isize);
                lo = (lo + c - k + 1).div_euclid(s) + ((lo + c - k + 1).rem_euclid(s) != 0) as isize;
                hi = (hi + c).div_euclid(s);
            }
        }
    }
    Some((lo, hi))
}

/// Analytic receptive-field summary along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    /// Width of the input interval seen by one bottleneck unit.
    pub bottleneck: usize,
    /// Largest distance from an output pixel's anchor to the left/right
    /// edge of its input interval (anchor `o · stride`).
    pub left: usize,
    pub right: usize,
    /// Input pixels per output pixel.
    pub stride: usize,
}

impl ReceptiveField {
    pub fn extent(&self) -> usize {
        self.left + self.right + 1
    }

    /// Smallest margin, rounded up to a multiple of `align`, that contains
    /// the field on both sides.
    pub fn margin(&self, align: usize) -> usize {
        self.left.max(self.right).div_ceil(align) * align
    }
}

/// Index of the last layer of the downsampling path (block4's last layer).
fn bottleneck_end<T: Scalar>(layers: &[Box<dyn Layer<T>>]) -> usize {
    layers
        .iter()
        .rposition(|l| l.name().starts_with("block"))
        .map(|i| i + 1)
        .unwrap_or(layers.len())
}

pub fn receptive_field(spec: &ArchSpec) -> Result<ReceptiveField> {
    let net: Network<f32> = spec.build()?;
    let layers = net.layers();
    let b_end = bottleneck_end(layers);
    let (lo, hi) = input_interval(layers, b_end, 0, 0).expect("downsampling path is local");
    let bottleneck = (hi - lo + 1) as usize;
    let stride = output_stride(spec)?;
    let mut left = 0isize;
    let mut right = 0isize;
    match input_interval(layers, layers.len(), 0, 0) {
        None => {
            let half = (spec.patch / 2) as isize;
            left = half;
            right = half;
        }
        Some(_) => {
            // The pattern repeats with the bottleneck period; scan a few periods.
            for o in 0..(16 * 8) as isize {
                let (lo, hi) = input_interval(layers, layers.len(), o, o).unwrap();
                let anchor = o * stride as isize;
                left = left.max(anchor - lo);
                right = right.max(hi - anchor);
            }
        }
    }
    Ok(ReceptiveField {
        bottleneck,
        left: left as usize,
        right: right as usize,
        stride,
    })
}

/// Input pixels per output pixel of a fully convolutional architecture
/// (the product of pooling strides over deconv strides). 0 for a network
/// with a global layer.
pub fn output_stride(spec: &ArchSpec) -> Result<usize> {
    let net: Network<f32> = spec.build()?;
    let mut down = 1usize;
    let mut up = 1usize;
    for l in net.layers() {
        match l.geometry() {
            Geometry::Window { stride, .. } => down *= stride,
            Geometry::Transposed { stride, .. } => up *= stride,
            Geometry::Global => return Ok(0),
            Geometry::Pointwise => {}
        }
    }
    Ok(down / up)
}
