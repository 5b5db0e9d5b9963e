//! Procedural six-class scenes for desk-scale verification.
//!
//! Channels 0..3 are pseudo-spectral, channel 3 is a pseudo-height. Paint
//! order: impervious ground and ribbons, low-vegetation blobs, buildings,
//! trees, clutter, cars. Ribbons are never painted over except by cars, and
//! cars sit only on ribbon pixels at ground height.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Tile};
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

pub const SYNTH_CLASSES: usize = 6;
pub const SYNTH_CHANNELS: usize = 4;
pub const HEIGHT_CHANNEL: usize = 3;

const IMPERVIOUS: u8 = 0;
const BUILDING: u8 = 1;
const LOW_VEG: u8 = 2;
const TREE: u8 = 3;
const CAR: u8 = 4;
const CLUTTER: u8 = 5;

/// Mean pseudo-spectral color per class. Buildings are close to impervious
/// ground and trees close to low vegetation; height separates them.
const COLORS: [[f32; 3]; 6] = [
    [0.55, 0.55, 0.55],
    [0.62, 0.48, 0.45],
    [0.35, 0.62, 0.30],
    [0.25, 0.50, 0.22],
    [0.20, 0.25, 0.75],
    [0.75, 0.30, 0.25],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_tiles: usize,
    pub val_tiles: usize,
    pub size: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, train_tiles: usize, val_tiles: usize, size: usize) -> Self {
        SynthConfig { seed, train_tiles, val_tiles, size }
    }
}

struct Canvas {
    size: usize,
    labels: Vec<u8>,
    height: Vec<f32>,
    ribbon: Vec<bool>,
}

impl Canvas {
    fn paint(&mut self, y: isize, x: isize, class: u8, h: f32) {
        let n = self.size as isize;
        if y < 0 || x < 0 || y >= n || x >= n {
            return;
        }
        let i = y as usize * self.size + x as usize;
        if self.ribbon[i] {
            return;
        }
        self.labels[i] = class;
        self.height[i] = h;
    }

    /// Paints every pixel of the box `[y0, y1) × [x0, x1)` where `inside` holds.
    fn fill(&mut self, y0: f64, y1: f64, x0: f64, x1: f64, class: u8, mut inside: impl FnMut(f64, f64) -> Option<f32>) {
        for y in y0.floor() as isize..y1.ceil() as isize {
            for x in x0.floor() as isize..x1.ceil() as isize {
                if let Some(h) = inside(y as f64, x as f64) {
                    self.paint(y, x, class, h);
                }
            }
        }
    }
}

fn point_in_polygon(y: f64, x: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (yi, xi) = poly[i];
        let (yj, xj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn scaled_count(rng: &mut ChaCha8Rng, per_512: f64, area: f64) -> usize {
    let mean = per_512 * area;
    (mean * rng.gen_range(0.7..1.3)).round().max(1.0) as usize
}

/// Tile `index` of the scene family `seed`, `size × size` pixels.
pub fn synth_tile(seed: u64, index: usize, size: usize) -> Tile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = size;
    let nf = n as f64;
    let area = (nf / 512.0).powi(2);
    let mut cv = Canvas { size: n, labels: vec![IMPERVIOUS; n * n], height: vec![0.0; n * n], ribbon: vec![false; n * n] };

    // Ribbons: horizontal and vertical roads, remembered with their direction.
    let mut ribbons: Vec<(bool, usize, usize)> = Vec::new();
    for k in 0..rng.gen_range(2..=3) {
        let horizontal = k % 2 == 0;
        let width = rng.gen_range(14..=22).min(n / 3).max(1);
        let start = rng.gen_range(0..n.saturating_sub(width).max(1));
        ribbons.push((horizontal, start, width));
        for a in start..(start + width).min(n) {
            for b in 0..n {
                let (y, x) = if horizontal { (a, b) } else { (b, a) };
                cv.ribbon[y * n + x] = true;
            }
        }
    }

    for _ in 0..scaled_count(&mut rng, 45.0, area) {
        let (cy, cx) = (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf));
        for _ in 0..rng.gen_range(3..=6) {
            let (dy, dx) = (rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0));
            let r: f64 = rng.gen_range(8.0..24.0);
            let (y, x) = (cy + dy, cx + dx);
            cv.fill(y - r, y + r + 1.0, x - r, x + r + 1.0, LOW_VEG, |py, px| {
                ((py - y).powi(2) + (px - x).powi(2) <= r * r).then_some(0.0)
            });
        }
    }

    for _ in 0..scaled_count(&mut rng, 34.0, area) {
        let (cy, cx) = (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf));
        let (hy, hx): (f64, f64) = (rng.gen_range(12.0..45.0), rng.gen_range(12.0..45.0));
        let theta: f64 = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..std::f64::consts::PI) };
        let (s, c) = theta.sin_cos();
        let h = rng.gen_range(0.45..0.9);
        let reach = hy.hypot(hx) + 1.0;
        cv.fill(cy - reach, cy + reach, cx - reach, cx + reach, BUILDING, |py, px| {
            let (dy, dx) = (py - cy, px - cx);
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            (u.abs() <= hx && v.abs() <= hy).then_some(h)
        });
    }

    for _ in 0..scaled_count(&mut rng, 220.0, area) {
        let (cy, cx) = (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf));
        let r: f64 = rng.gen_range(4.0..11.0);
        let top = rng.gen_range(0.25..0.6);
        cv.fill(cy - r, cy + r + 1.0, cx - r, cx + r + 1.0, TREE, |py, px| {
            let d2 = (py - cy).powi(2) + (px - cx).powi(2);
            (d2 <= r * r).then(|| (top * (1.0 - 0.5 * d2 / (r * r))) as f32)
        });
    }

    for _ in 0..scaled_count(&mut rng, 30.0, area) {
        let (cy, cx) = (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf));
        let k = rng.gen_range(5..=8);
        let poly: Vec<(f64, f64)> = (0..k)
            .map(|i| {
                let a = i as f64 / k as f64 * std::f64::consts::TAU + rng.gen_range(-0.3..0.3);
                let r = rng.gen_range(4.0..14.0);
                (cy + r * a.sin(), cx + r * a.cos())
            })
            .collect();
        let h = rng.gen_range(0.0..0.2);
        cv.fill(cy - 15.0, cy + 16.0, cx - 15.0, cx + 16.0, CLUTTER, |py, px| {
            point_in_polygon(py, px, &poly).then_some(h)
        });
    }

    // Cars: small rectangles aligned with a ribbon, entirely on ribbon pixels.
    for _ in 0..scaled_count(&mut rng, 90.0, area) {
        let (horizontal, start, width) = ribbons[rng.gen_range(0..ribbons.len())];
        let (along, across) = (9usize, 4usize);
        if width < across + 2 || n < along {
            continue;
        }
        let a0 = start + rng.gen_range(1..=width - across - 1);
        let b0 = rng.gen_range(0..=n - along);
        if a0 + across > n {
            continue;
        }
        let cells: Vec<usize> = (a0..a0 + across)
            .flat_map(|a| (b0..b0 + along).map(move |b| if horizontal { a * n + b } else { b * n + a }))
            .collect();
        if cells.iter().all(|&i| i < n * n && cv.ribbon[i] && cv.labels[i] == IMPERVIOUS) {
            for i in cells {
                cv.labels[i] = CAR;
                cv.height[i] = 0.0;
            }
        }
    }

    let noise = Normal::new(0.0f32, 0.06).expect("valid sigma");
    let hnoise = Normal::new(0.0f32, 0.01).expect("valid sigma");
    // Per-tile tint ramps along x.
    let tint: [f32; 3] = [rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)];
    let mut spectral = Tensor::zeros(Shape::new(1, SYNTH_CHANNELS, n, n));
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let class = cv.labels[i] as usize;
            let ramp = (x as f32 / n.max(1) as f32) - 0.5;
            for c in 0..3 {
                let v = COLORS[class][c] + tint[c] * ramp + noise.sample(&mut rng);
                spectral.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
            let h = if cv.labels[i] == CAR { 0.0 } else { (cv.height[i] + hnoise.sample(&mut rng)).clamp(0.0, 1.0) };
            spectral.set(0, HEIGHT_CHANNEL, y, x, h);
        }
    }
    Tile::new(format!("synth-{index:03}"), spectral, cv.labels).expect("consistent synthetic tile")
}

/// `train_tiles + val_tiles` tiles; the first `train_tiles` train.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let tiles: Vec<Tile> = (0..cfg.train_tiles + cfg.val_tiles).map(|i| synth_tile(cfg.seed, i, cfg.size)).collect();
    let mut train = tiles;
    let val = train.split_off(cfg.train_tiles);
    Dataset::new(train, val, SYNTH_CLASSES, Some(HEIGHT_CHANNEL))
}
