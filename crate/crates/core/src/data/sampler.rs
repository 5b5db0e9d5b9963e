//! Patch sampling: super-batch stores, class-balanced center selection,
//! overlapping grids and mini-batch assembly with flips and jitter.
//!
//! A store holds patch references into a shared tile set rather than copies,
//! so a 64,000-patch super-batch costs a few hundred kilobytes.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tile;
use crate::error::{Error, Result};
use crate::layers::loss::IGNORE;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub patch: usize,
    pub minibatch: usize,
    pub superbatch: usize,
    /// Epochs between super-batch resamples.
    pub resample_interval: u32,
    pub balanced: bool,
    pub flips: bool,
    pub jitter_sigma: f32,
    /// Leave the height channel without jitter.
    pub jitter_exempt_height: bool,
}

impl SamplerConfig {
    /// Super-batch of `minibatch · 500` patches.
    pub fn new(minibatch: usize) -> Self {
        SamplerConfig {
            patch: 65,
            minibatch,
            superbatch: minibatch * 500,
            resample_interval: 20,
            balanced: true,
            flips: true,
            jitter_sigma: 0.01,
            jitter_exempt_height: false,
        }
    }
}

/// A patch by its center in a tile of the store's tile set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRef {
    pub tile: u32,
    pub cy: u32,
    pub cx: u32,
}

#[derive(Clone, Debug)]
pub struct PatchStore {
    pub tiles: Arc<Vec<Tile>>,
    pub refs: Vec<PatchRef>,
    pub patch: usize,
}

impl PatchStore {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn central_label(&self, i: usize) -> u8 {
        let r = self.refs[i];
        self.tiles[r.tile as usize].label(r.cy as usize, r.cx as usize)
    }

    pub fn tile_id(&self, i: usize) -> &str {
        &self.tiles[self.refs[i].tile as usize].id
    }

    /// Copies patch `i` into `x` (`K × P × P`) and `labels` (`P × P`).
    pub fn copy_patch(&self, i: usize, x: &mut [f32], labels: &mut [u8]) {
        let r = self.refs[i];
        let t = &self.tiles[r.tile as usize];
        let p = self.patch;
        let half = p / 2;
        let (y0, x0) = (r.cy as usize - half, r.cx as usize - half);
        let w = t.width();
        for c in 0..t.channels() {
            let plane = t.spectral.plane(0, c);
            for y in 0..p {
                let src = &plane[(y0 + y) * w + x0..(y0 + y) * w + x0 + p];
                x[c * p * p + y * p..c * p * p + (y + 1) * p].copy_from_slice(src);
            }
        }
        for y in 0..p {
            labels[y * p..(y + 1) * p].copy_from_slice(&t.labels[(y0 + y) * w + x0..(y0 + y) * w + x0 + p]);
        }
    }
}

/// Valid patch centers grouped by central class.
#[derive(Clone, Debug)]
pub struct CenterIndex {
    pub per_class: Vec<Vec<PatchRef>>,
}

impl CenterIndex {
    /// Centers whose patch lies inside the tile and whose label is not ignored.
    pub fn build(tiles: &[Tile], patch: usize, classes: usize) -> Self {
        let half = patch / 2;
        let mut per_class = vec![Vec::new(); classes];
        for (ti, t) in tiles.iter().enumerate() {
            if t.height() < patch || t.width() < patch {
                continue;
            }
            for y in half..t.height() - half {
                for x in half..t.width() - half {
                    let l = t.label(y, x);
                    if l != IGNORE && (l as usize) < classes {
                        per_class[l as usize].push(PatchRef { tile: ti as u32, cy: y as u32, cx: x as u32 });
                    }
                }
            }
        }
        CenterIndex { per_class }
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    /// Balanced: class uniform over all classes, then a center uniform
    /// within the class. Unbalanced: a center uniform over all centers.
    pub fn draw(&self, n: usize, balanced: bool, rng: &mut impl Rng) -> Result<Vec<PatchRef>> {
        if balanced {
            if let Some(c) = self.per_class.iter().position(Vec::is_empty) {
                return Err(Error::Data(format!(
                    "class {c} has no valid patch center; balanced sampling impossible"
                )));
            }
            Ok((0..n)
                .map(|_| {
                    let list = &self.per_class[rng.gen_range(0..self.per_class.len())];
                    list[rng.gen_range(0..list.len())]
                })
                .collect())
        } else {
            let total = self.total();
            if total == 0 {
                return Err(Error::Data("no valid patch center".into()));
            }
            Ok((0..n)
                .map(|_| {
                    let mut k = rng.gen_range(0..total);
                    for list in &self.per_class {
                        if k < list.len() {
                            return list[k];
                        }
                        k -= list.len();
                    }
                    unreachable!("index below total")
                })
                .collect())
        }
    }
}

pub fn sample_superbatch(
    tiles: Arc<Vec<Tile>>,
    classes: usize,
    cfg: &SamplerConfig,
    n: usize,
    rng: &mut impl Rng,
) -> Result<PatchStore> {
    let index = CenterIndex::build(&tiles, cfg.patch, classes);
    let refs = index.draw(n, cfg.balanced, rng)?;
    Ok(PatchStore { tiles, refs, patch: cfg.patch })
}

/// Patch origins along an axis of length `n` for patches overlapping by
/// `overlap` pixels; the last origin is clamped so the patch ends at the
/// border. Empty when the axis is shorter than a patch.
pub fn grid_starts(n: usize, patch: usize, overlap: usize) -> Vec<usize> {
    if n < patch || overlap >= patch {
        return Vec::new();
    }
    let stride = patch - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + patch <= n).collect();
    if starts.last().map_or(true, |&s| s + patch < n) {
        starts.push(n - patch);
    }
    starts
}

/// Every grid patch of every tile.
pub fn grid_superbatch(tiles: Arc<Vec<Tile>>, patch: usize, overlap: usize) -> Result<PatchStore> {
    let half = patch / 2;
    let mut refs = Vec::new();
    for (ti, t) in tiles.iter().enumerate() {
        for y in grid_starts(t.height(), patch, overlap) {
            for x in grid_starts(t.width(), patch, overlap) {
                refs.push(PatchRef { tile: ti as u32, cy: (y + half) as u32, cx: (x + half) as u32 });
            }
        }
    }
    if refs.is_empty() {
        return Err(Error::Data(format!("no tile fits a {patch}x{patch} patch")));
    }
    Ok(PatchStore { tiles, refs, patch })
}

#[derive(Clone, Debug)]
pub struct Minibatch {
    /// `N × K × P × P`, mean-subtracted.
    pub x: Tensor<f32>,
    /// `N × P × P`.
    pub labels: Vec<u8>,
    /// Store indices the patches came from.
    pub indices: Vec<usize>,
}

/// Mirrors a `K × P × P` patch and its `P × P` labels in place.
pub fn flip_patch(x: &mut [f32], labels: &mut [u8], p: usize, horizontal: bool, vertical: bool) {
    fn flip<T>(plane: &mut [T], p: usize, h: bool, v: bool) {
        if h {
            plane.chunks_mut(p).for_each(|row| row.reverse());
        }
        if v {
            for y in 0..p / 2 {
                let (top, bottom) = plane.split_at_mut((p - 1 - y) * p);
                top[y * p..(y + 1) * p].swap_with_slice(&mut bottom[..p]);
            }
        }
    }
    for plane in x.chunks_mut(p * p) {
        flip(plane, p, horizontal, vertical);
    }
    flip(labels, p, horizontal, vertical);
}

/// Patches `indices` of `store`, mean-subtracted, without augmentation.
pub fn assemble(store: &PatchStore, indices: &[usize], mean: &[f32]) -> Minibatch {
    let p = store.patch;
    let k = mean.len();
    let mut x = Tensor::zeros(Shape::new(indices.len(), k, p, p));
    let mut labels = vec![0u8; indices.len() * p * p];
    for (n, &i) in indices.iter().enumerate() {
        store.copy_patch(i, x.sample_mut(n), &mut labels[n * p * p..(n + 1) * p * p]);
        for (c, plane) in x.sample_mut(n).chunks_mut(p * p).enumerate() {
            plane.iter_mut().for_each(|v| *v -= mean[c]);
        }
    }
    Minibatch { x, labels, indices: indices.to_vec() }
}

/// `cfg.minibatch` patches drawn uniformly from the store, flipped
/// horizontally and vertically with probability ½ each, jittered with
/// `N(0, σ²)` noise and mean-subtracted.
pub fn draw_minibatch(
    store: &PatchStore,
    cfg: &SamplerConfig,
    mean: &[f32],
    height_channel: Option<usize>,
    pick: &mut impl Rng,
    flips: &mut impl Rng,
    jitter: &mut impl Rng,
) -> Result<Minibatch> {
    if store.is_empty() {
        return Err(Error::Data("empty patch store".into()));
    }
    let indices: Vec<usize> = (0..cfg.minibatch).map(|_| pick.gen_range(0..store.len())).collect();
    let mut mb = assemble(store, &indices, mean);
    let p = store.patch;
    let noise = (cfg.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0f32, cfg.jitter_sigma).expect("positive sigma"));
    for n in 0..indices.len() {
        let labels = &mut mb.labels[n * p * p..(n + 1) * p * p];
        let x = mb.x.sample_mut(n);
        if cfg.flips {
            let (h, v) = (flips.gen_bool(0.5), flips.gen_bool(0.5));
            flip_patch(x, labels, p, h, v);
        }
        if let Some(noise) = &noise {
            for (c, plane) in x.chunks_mut(p * p).enumerate() {
                if cfg.jitter_exempt_height && Some(c) == height_channel {
                    continue;
                }
                plane.iter_mut().for_each(|v| *v += noise.sample(jitter));
            }
        }
    }
    Ok(mb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_origins() {
        assert_eq!(grid_starts(129, 65, 33), vec![0, 32, 64]);
        assert_eq!(grid_starts(65, 65, 33), vec![0]);
        assert_eq!(grid_starts(97, 65, 33), vec![0, 32]);
        assert_eq!(grid_starts(100, 65, 33), vec![0, 32, 35]);
        assert!(grid_starts(64, 65, 33).is_empty());
    }

    #[test]
    fn flips_are_involutions() {
        let p = 5;
        let x0: Vec<f32> = (0..2 * p * p).map(|v| v as f32).collect();
        let l0: Vec<u8> = (0..p * p).map(|v| v as u8).collect();
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let (mut x, mut l) = (x0.clone(), l0.clone());
            flip_patch(&mut x, &mut l, p, h, v);
            assert_ne!(l, l0);
            // labels follow the spectra of channel 0 exactly
            assert!(x[..p * p].iter().zip(&l).all(|(&a, &b)| a as u8 == b));
            flip_patch(&mut x, &mut l, p, h, v);
            assert_eq!((x, l), (x0.clone(), l0.clone()));
        }
    }

    #[test]
    fn single_class_centers() {
        let t = Tile::new("t", Tensor::zeros(Shape::new(1, 1, 9, 9)), vec![2; 81]).unwrap();
        let store = sample_superbatch(
            Arc::new(vec![t]),
            3,
            &SamplerConfig { patch: 5, balanced: false, ..SamplerConfig::new(4) },
            100,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!((0..store.len()).all(|i| store.central_label(i) == 2));
        let mut balanced = SamplerConfig::new(4);
        balanced.patch = 5;
        assert!(sample_superbatch(store.tiles.clone(), 3, &balanced, 10, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
