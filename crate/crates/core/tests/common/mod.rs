//! Independent oracles shared by the property suites and the acceptance run.
#![allow(dead_code)]

use dlabel::layers::loss::IGNORE;

/// Per-pixel oracle: every quantity from explicit pixel loops, without a
/// confusion matrix.
pub struct Oracle {
    pub oa: f64,
    pub kappa: f64,
    pub aa: f64,
    pub f1: f64,
}

pub fn oracle(pred: &[u8], reference: &[u8], classes: usize) -> Option<Oracle> {
    let live: Vec<(u8, u8)> = pred.iter().zip(reference).filter(|(_, &r)| r != IGNORE).map(|(&p, &r)| (p, r)).collect();
    if live.is_empty() {
        return None;
    }
    let n = live.len() as f64;
    let agree = live.iter().filter(|(p, r)| p == r).count() as f64;
    let oa = agree / n;
    let mut pe = 0.0;
    let (mut recalls, mut f1s) = (Vec::new(), Vec::new());
    for c in 0..classes as u8 {
        let in_ref = live.iter().filter(|(_, r)| *r == c).count() as f64;
        let in_pred = live.iter().filter(|(p, _)| *p == c).count() as f64;
        let hit = live.iter().filter(|(p, r)| *p == c && *r == c).count() as f64;
        pe += in_ref * in_pred / (n * n);
        if in_ref > 0.0 {
            recalls.push(hit / in_ref);
        }
        if in_ref > 0.0 && in_pred > 0.0 {
            let (p, r) = (hit / in_pred, hit / in_ref);
            f1s.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        }
    }
    let kappa = if pe < 1.0 { (oa - pe) / (1.0 - pe) } else { 1.0 };
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Some(Oracle { oa, kappa, aa: mean(&recalls), f1: mean(&f1s) })
}

/// Brute-force disc erosion: every in-bounds pixel within distance `r`
/// carries the center's label.
pub fn brute_erosion(reference: &[u8], h: usize, w: usize, r: isize) -> Vec<bool> {
    let mut mask = vec![true; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let label = reference[(y * w as isize + x) as usize];
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if dx * dx + dy * dy <= r * r && yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        if reference[(yy * w as isize + xx) as usize] != label {
                            mask[(y * w as isize + x) as usize] = false;
                        }
                    }
                }
            }
        }
    }
    mask
}
