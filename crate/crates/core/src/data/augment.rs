//! Tile rotation onto an expanded canvas.
//!
//! Spectra are sampled bilinearly and labels by nearest neighbor. Canvas
//! pixels whose source point falls outside the tile are void: zero spectra
//! and the ignore label.

use rand::Rng;

use super::Tile;
use crate::layers::loss::IGNORE;
use crate::tensor::{Shape, Tensor};

/// One counter-clockwise quarter turn: `out[y][x] = src[H-1-x][y]`.
fn quarter_turn(t: &Tile) -> Tile {
    let (h, w, k) = (t.height(), t.width(), t.channels());
    let mut spectral = Tensor::zeros(Shape::new(1, k, w, h));
    let mut labels = vec![0u8; h * w];
    for c in 0..k {
        let src = t.spectral.plane(0, c);
        let dst = spectral.plane_mut(0, c);
        for y in 0..w {
            for x in 0..h {
                dst[y * h + x] = src[(h - 1 - x) * w + y];
            }
        }
    }
    for y in 0..w {
        for x in 0..h {
            labels[y * h + x] = t.labels[(h - 1 - x) * w + y];
        }
    }
    Tile { id: t.id.clone(), spectral, labels }
}

/// Rotates `tile` by `degrees` about its center. Multiples of 90° are exact
/// index permutations; other angles enlarge the canvas to hold the whole
/// rotated tile.
pub fn rotate_tile(tile: &Tile, degrees: f64) -> Tile {
    let d = degrees.rem_euclid(360.0);
    let quarters = (d / 90.0).round();
    if (d - quarters * 90.0).abs() < 1e-9 {
        let mut out = tile.clone();
        for _ in 0..(quarters as usize % 4) {
            out = quarter_turn(&out);
        }
        return out;
    }
    let (h, w, k) = (tile.height(), tile.width(), tile.channels());
    let (sin, cos) = d.to_radians().sin_cos();
    let extent = |a: f64, b: f64| ((a.abs() + b.abs()) - 1e-6).ceil().max(1.0) as usize;
    let oh = extent(w as f64 * sin, h as f64 * cos);
    let ow = extent(w as f64 * cos, h as f64 * sin);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ocy, ocx) = ((oh as f64 - 1.0) / 2.0, (ow as f64 - 1.0) / 2.0);
    let mut spectral = Tensor::zeros(Shape::new(1, k, oh, ow));
    let mut labels = vec![IGNORE; oh * ow];
    const EPS: f64 = 1e-6;
    for oy in 0..oh {
        for ox in 0..ow {
            let (dy, dx) = (oy as f64 - ocy, ox as f64 - ocx);
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            if sx < -EPS || sy < -EPS || sx > w as f64 - 1.0 + EPS || sy > h as f64 - 1.0 + EPS {
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, w as f64 - 1.0), sy.clamp(0.0, h as f64 - 1.0));
            labels[oy * ow + ox] = tile.label(sy.round() as usize, sx.round() as usize);
            let x0 = (sx.floor() as usize).min(w.saturating_sub(2));
            let y0 = (sy.floor() as usize).min(h.saturating_sub(2));
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..k {
                let p = tile.spectral.plane(0, c);
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                spectral.set(0, c, oy, ox, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tile { id: tile.id.clone(), spectral, labels }
}

/// Rotated working copies, each at an angle uniform in `[0°, 360°)`.
pub fn rotate_tiles(tiles: &[Tile], rng: &mut impl Rng) -> Vec<Tile> {
    tiles.iter().map(|t| rotate_tile(t, rng.gen_range(0.0..360.0))).collect()
}
