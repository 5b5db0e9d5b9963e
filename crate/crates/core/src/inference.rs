//! Dense probability maps over images of any size.
//!
//! Fully convolutional networks run on overlapping tiles. Tile origins and
//! margins are multiples of the network's total pooling factor, so every
//! pixel sees the same relative pooling phase whatever the tiling, and
//! the margin contains the receptive field. Interiors are therefore
//! independent of the tiling and are stitched without blending.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use crate::arch::{receptive_field, ArchSpec};
use crate::error::{Error, Result};
use crate::layers::loss::softmax;
use crate::layers::Mode;
use crate::network::Network;
use crate::tensor::{anchored_upsample, reflect_index, Shape, Tensor};

/// Pooling factor of the downsampling path; tile geometry aligns to it.
pub const ALIGN: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictOptions {
    /// Sliding-window stride of the patch classifier.
    pub stride: usize,
    /// Interior size of a tile for fully convolutional networks.
    pub tile: usize,
    /// Windows per forward pass of the patch classifier.
    pub batch: usize,
    pub workers: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            stride: 2,
            tile: 256,
            batch: 64,
            workers: default_workers(),
        }
    }
}

/// `DLABEL_THREADS` if set, else the available parallelism.
pub fn default_workers() -> usize {
    std::env::var("DLABEL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TilingPlan {
    /// Interior edge length, a multiple of `ALIGN`.
    pub core: usize,
    /// Context on each side, a multiple of `ALIGN`.
    pub margin: usize,
    /// Input pixels per network output pixel (1 for full resolution).
    pub out_stride: usize,
}

impl TilingPlan {
    pub fn new(core: usize, margin: usize, out_stride: usize) -> Result<Self> {
        if core == 0 || core % ALIGN != 0 || margin % ALIGN != 0 {
            return Err(Error::Config(format!(
                "tile core {core} and margin {margin} must be multiples of {ALIGN} (core > 0)"
            )));
        }
        if out_stride == 0 || ALIGN % out_stride != 0 {
            return Err(Error::Config(format!("output stride {out_stride} must divide {ALIGN}")));
        }
        Ok(TilingPlan { core, margin, out_stride })
    }

    /// Margin from the analytic receptive field, core rounded up to `ALIGN`.
    pub fn for_arch(spec: &ArchSpec, core: usize) -> Result<Self> {
        let rf = receptive_field(spec)?;
        if rf.stride == 0 {
            return Err(Error::Config(format!("`{}` is not fully convolutional", spec.tag)));
        }
        Self::new(core.max(1).div_ceil(ALIGN) * ALIGN, rf.margin(ALIGN), rf.stride)
    }

    /// Edge length of the network input for one tile (`8k + 1`).
    pub fn input_size(&self) -> usize {
        self.core + 2 * self.margin + 1
    }

    /// Tile interior origins along an axis of length `n`.
    pub fn origins(&self, n: usize) -> Vec<usize> {
        (0..n).step_by(self.core).collect()
    }
}

/// `h × w` window of `image` (batch 0) at `(y0, x0)`, mirrored at borders.
pub fn window_reflect(image: &Tensor<f32>, y0: isize, x0: isize, h: usize, w: usize) -> Tensor<f32> {
    let s = image.shape();
    let rows: Vec<usize> = (0..h).map(|y| reflect_index(y0 + y as isize, s.height)).collect();
    let cols: Vec<usize> = (0..w).map(|x| reflect_index(x0 + x as isize, s.width)).collect();
    let mut out = Tensor::zeros(Shape::new(1, s.channels, h, w));
    for c in 0..s.channels {
        let src = image.plane(0, c);
        let dst = out.plane_mut(0, c);
        for (y, &sy) in rows.iter().enumerate() {
            let row = &src[sy * s.width..(sy + 1) * s.width];
            for (x, &sx) in cols.iter().enumerate() {
                dst[y * w + x] = row[sx];
            }
        }
    }
    out
}

fn check_image(net: &Network<f32>, image: &Tensor<f32>) -> Result<()> {
    if image.shape().batch != 1 {
        return Err(Error::Shape(format!("expected one image, got {}", image.shape())));
    }
    let want = net
        .layers()
        .first()
        .and_then(|l| l.params().first().map(|(_, p)| p.value.shape().channels));
    match want {
        Some(k) if k != image.shape().channels => Err(Error::Shape(format!(
            "image has {} channels, network expects {k}",
            image.shape().channels
        ))),
        _ => Ok(()),
    }
}

/// Runs `work` over `items` on up to `workers` threads, each with its own
/// clone of `net`, and returns the results in item order.
fn parallel_map<I: Sync, R: Send>(
    net: &Network<f32>,
    items: &[I],
    workers: usize,
    work: impl Fn(&mut Network<f32>, &I) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        let mut local = net.clone();
        return items.iter().map(|it| work(&mut local, it)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let mut local = net.clone();
                let work = &work;
                scope.spawn(move || part.iter().map(|it| work(&mut local, it)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Probabilities on the lattice `(i·s, j·s)`, `s = plan.out_stride`, of
/// shape `1 × C × ceil(H/s) × ceil(W/s)`.
pub fn run_tiled(
    net: &mut Network<f32>,
    image: &Tensor<f32>,
    plan: &TilingPlan,
    workers: usize,
) -> Result<Tensor<f32>> {
    check_image(net, image)?;
    net.set_mode(Mode::Eval);
    let s = image.shape();
    let st = plan.out_stride;
    let (gh, gw) = (s.height.div_ceil(st), s.width.div_ceil(st));
    let tiles: Vec<(usize, usize)> = plan
        .origins(s.height)
        .into_iter()
        .flat_map(|y| plan.origins(s.width).into_iter().map(move |x| (y, x)))
        .collect();
    let m = plan.margin as isize;
    let size = plan.input_size();
    let parts = parallel_map(net, &tiles, workers, |local, &(ty, tx)| {
        let input = window_reflect(image, ty as isize - m, tx as isize - m, size, size);
        let probs = softmax(&local.predict(&input)?);
        let h = (s.height - ty).min(plan.core).div_ceil(st);
        let w = (s.width - tx).min(plan.core).div_ceil(st);
        probs.crop(plan.margin / st, plan.margin / st, h, w)
    })?;
    let classes = parts.first().map(|p| p.shape().channels).unwrap_or(1);
    let mut out = Tensor::zeros(Shape::new(1, classes, gh, gw));
    for (&(ty, tx), p) in tiles.iter().zip(&parts) {
        out.paste(p, ty / st, tx / st)?;
    }
    Ok(out)
}

pub fn predict_fpl(net: &mut Network<f32>, image: &Tensor<f32>, plan: &TilingPlan) -> Result<Tensor<f32>> {
    if plan.out_stride != 1 {
        return Err(Error::Config("full-resolution prediction needs output stride 1".into()));
    }
    run_tiled(net, image, plan, default_workers())
}

pub fn predict_spl(net: &mut Network<f32>, spec: &ArchSpec, image: &Tensor<f32>, core: usize) -> Result<Tensor<f32>> {
    let plan = TilingPlan::for_arch(spec, core)?;
    let coarse = run_tiled(net, image, &plan, default_workers())?;
    let s = image.shape();
    let st = plan.out_stride as f64;
    Ok(renormalize(anchored_upsample(&coarse, s.height, s.width, 0.0, st)))
}

/// Number of sliding-window positions for an `h × w` image.
pub fn pc_window_count(h: usize, w: usize, stride: usize) -> usize {
    h.div_ceil(stride) * w.div_ceil(stride)
}

/// Window centers `i·s + s/2` along an axis of length `n`.
pub fn pc_centers(n: usize, stride: usize) -> Vec<usize> {
    (0..n.div_ceil(stride)).map(|i| i * stride + stride / 2).collect()
}

/// Class probabilities of the windows centered at `centers` (`N × C × 1 × 1`).
pub fn pc_window_scores(
    net: &mut Network<f32>,
    patch: usize,
    image: &Tensor<f32>,
    centers: &[(usize, usize)],
    batch: usize,
    workers: usize,
) -> Result<Tensor<f32>> {
    check_image(net, image)?;
    net.set_mode(Mode::Eval);
    let half = (patch / 2) as isize;
    let batches: Vec<&[(usize, usize)]> = centers.chunks(batch.max(1)).collect();
    let parts = parallel_map(net, &batches, workers, |local, chunk| {
        let windows: Vec<Tensor<f32>> = chunk
            .iter()
            .map(|&(cy, cx)| window_reflect(image, cy as isize - half, cx as isize - half, patch, patch))
            .collect();
        Ok(softmax(&local.predict(&Tensor::stack(&windows)?)?))
    })?;
    Tensor::stack(&parts)
}

pub fn predict_pc_sliding(
    net: &mut Network<f32>,
    spec: &ArchSpec,
    image: &Tensor<f32>,
    stride: usize,
    batch: usize,
) -> Result<Tensor<f32>> {
    if stride == 0 {
        return Err(Error::Config("sliding stride must be >= 1".into()));
    }
    let s = image.shape();
    let ys = pc_centers(s.height, stride);
    let xs = pc_centers(s.width, stride);
    let centers: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect();
    let scores = pc_window_scores(net, spec.patch, image, &centers, batch, default_workers())?;
    let c = scores.shape().channels;
    let (gh, gw) = (ys.len(), xs.len());
    let grid = Tensor::from_fn(Shape::new(1, c, gh, gw), |_, k, i, j| scores.get(i * gw + j, k, 0, 0));
    let offset = (stride / 2) as f64;
    Ok(renormalize(anchored_upsample(&grid, s.height, s.width, offset, stride as f64)))
}

/// Rescales every pixel's channel vector to sum to one.
pub fn renormalize(mut t: Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let p = s.plane();
    for n in 0..s.batch {
        let d = t.sample_mut(n);
        for i in 0..p {
            let z: f32 = (0..s.channels).map(|c| d[c * p + i]).sum();
            if z > 0.0 {
                for c in 0..s.channels {
                    d[c * p + i] /= z;
                }
            }
        }
    }
    t
}

/// Per-pixel argmax (ties to the lowest class) of a `1 × C × H × W` map.
pub fn scores_to_map(scores: &Tensor<f32>) -> Vec<u8> {
    scores.argmax_channels().into_iter().map(|c| c as u8).collect()
}

const SCORE_MAGIC: &[u8; 4] = b"DLSC";

/// Raw score dump: `"DLSC"`, u32 C, u32 H, u32 W, then `C·H·W` f32, all
/// little-endian, channel-major.
pub fn write_scores(path: impl AsRef<Path>, scores: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let s = scores.shape();
    let mut buf = Vec::with_capacity(16 + scores.len() * 4);
    buf.extend_from_slice(SCORE_MAGIC);
    for d in [s.channels, s.height, s.width] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in scores.sample(0) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..4] != SCORE_MAGIC {
        return Err(Error::Data(format!("{}: not a score dump", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = Shape::new(1, dim(0), dim(1), dim(2));
    if buf.len() != 16 + shape.len() * 4 {
        return Err(Error::Data(format!("{}: truncated score dump", path.display())));
    }
    let data = buf[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchEntry {
    pub method: String,
    pub seconds: f64,
    /// Network evaluations (tiles or windows) the timing covers.
    pub units: usize,
    /// True when timed on a subset of windows and scaled to the full count.
    pub extrapolated: bool,
}

/// Wall-clock seconds for a fully convolutional prediction of `image`.
pub fn time_dense(
    label: &str,
    net: &mut Network<f32>,
    spec: &ArchSpec,
    image: &Tensor<f32>,
    opts: &PredictOptions,
) -> Result<BenchEntry> {
    let arch = spec.architecture()?;
    let plan = TilingPlan::for_arch(spec, opts.tile)?;
    let s = image.shape();
    let t0 = Instant::now();
    arch.predict(net, spec, image, opts)?;
    Ok(BenchEntry {
        method: label.to_string(),
        seconds: t0.elapsed().as_secs_f64(),
        units: plan.origins(s.height).len() * plan.origins(s.width).len(),
        extrapolated: false,
    })
}

/// Wall-clock seconds for sliding-window prediction at `stride`. With
/// `sample = Some(n)` only the first `n` windows (row-major) are evaluated
/// and the time is scaled linearly to the full window count; windows are
/// all the same size, so per-window cost does not depend on position.
pub fn time_sliding(
    net: &mut Network<f32>,
    spec: &ArchSpec,
    image: &Tensor<f32>,
    stride: usize,
    opts: &PredictOptions,
    sample: Option<usize>,
) -> Result<BenchEntry> {
    let s = image.shape();
    let total = pc_window_count(s.height, s.width, stride);
    let method = format!("pc-stride{stride}");
    match sample {
        Some(n) if n < total => {
            let ys = pc_centers(s.height, stride);
            let xs = pc_centers(s.width, stride);
            let centers: Vec<(usize, usize)> = ys
                .iter()
                .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
                .take(n)
                .collect();
            let t0 = Instant::now();
            pc_window_scores(net, spec.patch, image, &centers, opts.batch, opts.workers)?;
            let secs = t0.elapsed().as_secs_f64() * total as f64 / n as f64;
            Ok(BenchEntry { method, seconds: secs, units: total, extrapolated: true })
        }
        _ => {
            let t0 = Instant::now();
            predict_pc_sliding(net, spec, image, stride, opts.batch)?;
            Ok(BenchEntry {
                method,
                seconds: t0.elapsed().as_secs_f64(),
                units: total,
                extrapolated: false,
            })
        }
    }
}
