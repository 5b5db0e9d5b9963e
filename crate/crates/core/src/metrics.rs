//! Confusion matrices, accuracy measures and the four evaluation regimes.
//!
//! Rows index the reference class, columns the predicted class. Classes with
//! an undefined rate (empty row or column) are left out of the class
//! averages and counted in [`Metrics::excluded_aa`] / [`Metrics::excluded_f1`].

use std::fmt::Write as _;

use crate::data::palette::BACKGROUND;
use crate::error::{Error, Result};
use crate::layers::loss::IGNORE;

/// Radius of the disc used to erode reference class edges.
pub const EROSION_RADIUS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    /// Pixels skipped by the mask or carrying the ignore label.
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes], ignored: 0 }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, reference: usize, predicted: usize) {
        self.counts[reference * self.classes + predicted] += 1;
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes].iter().sum()
    }

    pub fn col(&self, c: usize) -> u64 {
        (0..self.classes).map(|r| self.get(r, c)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Data(format!("cannot merge {}-class and {}-class matrices", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.ignored += other.ignored;
        Ok(())
    }
}

/// Counts pixels where `mask` holds (all when `None`) and the reference is
/// a class below `classes`. Predictions must all be valid classes.
pub fn confusion(pred: &[u8], reference: &[u8], mask: Option<&[bool]>, classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != reference.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::Data(format!(
            "prediction ({}), reference ({}) and mask sizes differ",
            pred.len(),
            reference.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for i in 0..pred.len() {
        let r = reference[i];
        if mask.is_some_and(|m| !m[i]) || r == IGNORE || r as usize >= classes {
            cm.ignored += 1;
            continue;
        }
        let p = pred[i] as usize;
        if p >= classes {
            return Err(Error::Data(format!("pixel {i}: predicted class {p} >= {classes}")));
        }
        cm.add(r as usize, p);
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum F1Mode {
    /// `2PR / (P + R)`.
    #[default]
    Harmonic,
    /// `√(P·R)`.
    Geometric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub kappa: f64,
    pub aa: f64,
    pub f1: f64,
    /// Recall per class, `None` for an empty reference row.
    pub class_accuracy: Vec<Option<f64>>,
    /// `None` when precision or recall is undefined.
    pub class_f1: Vec<Option<f64>>,
    pub excluded_aa: usize,
    pub excluded_f1: usize,
    pub pixels: u64,
}

fn mean_defined(v: &[Option<f64>]) -> (f64, usize) {
    let defined: Vec<f64> = v.iter().flatten().copied().collect();
    let mean = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    (mean, v.len() - defined.len())
}

/// Kappa is 1 when chance agreement is 1, which requires a single class in
/// both marginals and hence perfect agreement.
pub fn derive_metrics(cm: &ConfusionMatrix, mode: F1Mode) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    let t = total as f64;
    let oa = cm.trace() as f64 / t;
    let pe: f64 = (0..cm.classes()).map(|c| cm.row(c) as f64 * cm.col(c) as f64).sum::<f64>() / (t * t);
    let kappa = if pe < 1.0 { (oa - pe) / (1.0 - pe) } else { 1.0 };
    let mut class_accuracy = Vec::with_capacity(cm.classes());
    let mut class_f1 = Vec::with_capacity(cm.classes());
    for c in 0..cm.classes() {
        let (d, row, col) = (cm.get(c, c) as f64, cm.row(c), cm.col(c));
        let recall = (row > 0).then(|| d / row as f64);
        let precision = (col > 0).then(|| d / col as f64);
        class_accuracy.push(recall);
        class_f1.push(match (precision, recall) {
            (Some(p), Some(r)) if p + r == 0.0 => Some(0.0),
            (Some(p), Some(r)) => Some(match mode {
                F1Mode::Harmonic => 2.0 * p * r / (p + r),
                F1Mode::Geometric => (p * r).sqrt(),
            }),
            _ => None,
        });
    }
    let (aa, excluded_aa) = mean_defined(&class_accuracy);
    let (f1, excluded_f1) = mean_defined(&class_f1);
    Ok(Metrics { oa, kappa, aa, f1, class_accuracy, class_f1, excluded_aa, excluded_f1, pixels: total })
}

/// Half-widths of the disc rows `dy = -r..=r`.
fn disc_rows(radius: usize) -> Vec<(isize, usize)> {
    let r = radius as isize;
    (-r..=r)
        .map(|dy| {
            let rem = (r * r - dy * dy) as usize;
            let mut hw = 0;
            while (hw + 1) * (hw + 1) <= rem {
                hw += 1;
            }
            (dy, hw)
        })
        .collect()
}

/// Evaluation mask after eroding every reference class with the disc
/// `dx² + dy² ≤ radius²`: a pixel survives iff every in-bounds pixel of
/// the disc around it carries its label. The ignore label erodes like a
/// class; the raster border is not an edge.
pub fn erode_reference(reference: &[u8], h: usize, w: usize, radius: usize) -> Vec<bool> {
    assert_eq!(reference.len(), h * w, "reference is not {h}x{w}");
    // Extent of the equal-label run through every pixel of its row.
    let mut run_lo = vec![0usize; h * w];
    let mut run_hi = vec![0usize; h * w];
    for y in 0..h {
        let row = &reference[y * w..(y + 1) * w];
        let mut start = 0;
        for x in 0..=w {
            if x == w || row[x] != row[start] {
                for i in start..x {
                    run_lo[y * w + i] = start;
                    run_hi[y * w + i] = x - 1;
                }
                start = x;
            }
        }
    }
    let rows = disc_rows(radius);
    let mut mask = vec![true; h * w];
    for y in 0..h {
        for x in 0..w {
            let label = reference[y * w + x];
            mask[y * w + x] = rows.iter().all(|&(dy, hw)| {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    return true;
                }
                let j = yy as usize * w + x;
                reference[j] == label && run_lo[j] + hw.min(x) <= x && run_hi[j] >= (x + hw).min(w - 1)
            });
        }
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Full,
    NoBackground,
    ErodedFull,
    ErodedNoBackground,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Full, Regime::NoBackground, Regime::ErodedFull, Regime::ErodedNoBackground];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::NoBackground => "no bk",
            Regime::ErodedFull => "er full",
            Regime::ErodedNoBackground => "er no bk",
        }
    }

    /// Key prefix in the machine-readable report.
    pub fn key(self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::NoBackground => "nobk",
            Regime::ErodedFull => "er_full",
            Regime::ErodedNoBackground => "er_nobk",
        }
    }

    fn eroded(self) -> bool {
        matches!(self, Regime::ErodedFull | Regime::ErodedNoBackground)
    }

    fn drops_background(self) -> bool {
        matches!(self, Regime::NoBackground | Regime::ErodedNoBackground)
    }
}

/// Confusion matrices of the four regimes, accumulated over any number of
/// prediction/reference pairs.
#[derive(Clone, Debug)]
pub struct RegimeAccumulator {
    pub classes: usize,
    pub matrices: [ConfusionMatrix; 4],
}

impl RegimeAccumulator {
    pub fn new(classes: usize) -> Self {
        RegimeAccumulator { classes, matrices: std::array::from_fn(|_| ConfusionMatrix::new(classes)) }
    }

    /// "No bk" drops pixels whose reference is [`BACKGROUND`]; predictions
    /// of background elsewhere remain errors.
    pub fn add(&mut self, pred: &[u8], reference: &[u8], h: usize, w: usize) -> Result<()> {
        if reference.len() != h * w {
            return Err(Error::Data(format!("reference has {} pixels, expected {h}x{w}", reference.len())));
        }
        let eroded = erode_reference(reference, h, w, EROSION_RADIUS);
        for (k, regime) in Regime::ALL.iter().enumerate() {
            let mask: Vec<bool> = (0..h * w)
                .map(|i| (!regime.eroded() || eroded[i]) && !(regime.drops_background() && reference[i] == BACKGROUND))
                .collect();
            self.matrices[k].merge(&confusion(pred, reference, Some(&mask), self.classes)?)?;
        }
        Ok(())
    }

    pub fn report(&self, mode: F1Mode) -> MetricsReport {
        MetricsReport {
            classes: self.classes,
            regimes: Regime::ALL
                .iter()
                .zip(&self.matrices)
                .map(|(&r, cm)| (r, derive_metrics(cm, mode).ok()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub classes: usize,
    /// `None` for a regime that counted no pixel.
    pub regimes: Vec<(Regime, Option<Metrics>)>,
}

impl MetricsReport {
    pub fn get(&self, regime: Regime) -> Option<&Metrics> {
        self.regimes.iter().find(|(r, _)| *r == regime).and_then(|(_, m)| m.as_ref())
    }

    /// Aligned table in percent: one row per regime, then per-class F1.
    pub fn table(&self, class_names: &[&str]) -> String {
        let name = |c: usize| class_names.get(c).copied().map(str::to_string).unwrap_or_else(|| format!("class{c}"));
        let mut s = format!("{:<10}{:>8}{:>8}{:>8}{:>8}", "regime", "OA", "K", "AA", "F1");
        for c in 0..self.classes {
            let _ = write!(s, "{:>16}", name(c));
        }
        s.push('\n');
        let pct = |v: Option<f64>| v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into());
        for (r, m) in &self.regimes {
            let _ = write!(s, "{:<10}", r.name());
            match m {
                Some(m) => {
                    for v in [m.oa, m.kappa, m.aa, m.f1] {
                        let _ = write!(s, "{:>8}", pct(Some(v)));
                    }
                    for f in &m.class_f1 {
                        let _ = write!(s, "{:>16}", pct(*f));
                    }
                }
                None => {
                    let _ = write!(s, "{:>8}", "n/a");
                }
            }
            s.push('\n');
        }
        s
    }

    /// `key = value` lines with fractions.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for (r, m) in &self.regimes {
            let k = r.key();
            let Some(m) = m else {
                let _ = writeln!(s, "{k}.pixels = 0");
                continue;
            };
            let _ = writeln!(s, "{k}.pixels = {}", m.pixels);
            for (name, v) in [("oa", m.oa), ("kappa", m.kappa), ("aa", m.aa), ("f1", m.f1)] {
                let _ = writeln!(s, "{k}.{name} = {v:.6}");
            }
            let _ = writeln!(s, "{k}.excluded_aa = {}", m.excluded_aa);
            let _ = writeln!(s, "{k}.excluded_f1 = {}", m.excluded_f1);
            for c in 0..self.classes {
                if let Some(v) = m.class_accuracy[c] {
                    let _ = writeln!(s, "{k}.class{c}.accuracy = {v:.6}");
                }
                if let Some(v) = m.class_f1[c] {
                    let _ = writeln!(s, "{k}.class{c}.f1 = {v:.6}");
                }
            }
        }
        s
    }
}

pub fn evaluate_regimes(pred: &[u8], reference: &[u8], h: usize, w: usize, classes: usize, mode: F1Mode) -> Result<MetricsReport> {
    let mut acc = RegimeAccumulator::new(classes);
    acc.add(pred, reference, h, w)?;
    Ok(acc.report(mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm2(a: u64, b: u64, c: u64, d: u64) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(2);
        cm.counts = vec![a, b, c, d];
        cm
    }

    #[test]
    fn worked_kappa() {
        let m = derive_metrics(&cm2(50, 10, 5, 35), F1Mode::Harmonic).unwrap();
        assert!((m.oa - 0.85).abs() < 1e-12);
        assert!((m.kappa - 0.6939).abs() < 1e-4, "{}", m.kappa);
        assert!((m.aa - (50.0 / 60.0 + 35.0 / 40.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let m = derive_metrics(&cm2(3, 0, 0, 4), F1Mode::Harmonic).unwrap();
        assert_eq!((m.oa, m.kappa, m.aa, m.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(derive_metrics(&ConfusionMatrix::new(3), F1Mode::Harmonic).is_err());
        let single = derive_metrics(&cm2(5, 0, 0, 0), F1Mode::Harmonic).unwrap();
        assert_eq!((single.kappa, single.excluded_aa, single.excluded_f1), (1.0, 1, 1));
    }

    #[test]
    fn hand_counted_ten_pixels() {
        let reference = [0, 0, 1, 1, 2, 2, 2, IGNORE, 1, 0];
        let pred = [0, 1, 1, 1, 2, 0, 2, 2, 2, 0];
        let cm = confusion(&pred, &reference, None, 3).unwrap();
        assert_eq!(cm.ignored, 1);
        assert_eq!(cm.total(), 9);
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 1), cm.get(1, 2), cm.get(2, 2), cm.get(2, 0)), (2, 1, 2, 1, 2, 1));
        let empty = confusion(&pred, &reference, Some(&[false; 10]), 3).unwrap();
        assert_eq!((empty.total(), empty.ignored), (0, 10));
    }

    #[test]
    fn geometric_flag() {
        let m = derive_metrics(&cm2(50, 10, 5, 35), F1Mode::Geometric).unwrap();
        let (p0, r0) = (50.0 / 55.0, 50.0 / 60.0);
        assert!((m.class_f1[0].unwrap() - (p0 * r0 as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn half_planes_erode_three_columns_each_side() {
        let (h, w, k) = (9, 16, 8);
        let reference: Vec<u8> = (0..h * w).map(|i| u8::from(i % w >= k)).collect();
        let mask = erode_reference(&reference, h, w, 3);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(mask[y * w + x], !(k - 3..k + 3).contains(&x), "({y},{x})");
            }
        }
        assert!(erode_reference(&[4; 30], 5, 6, 3).iter().all(|&m| m));
    }

    #[test]
    fn no_background_equals_full_without_clutter() {
        let reference: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
        let pred: Vec<u8> = (0..64).map(|i| (i % 4) as u8).collect();
        let r = evaluate_regimes(&pred, &reference, 8, 8, 6, F1Mode::Harmonic).unwrap();
        assert_eq!(r.get(Regime::Full), r.get(Regime::NoBackground));
        assert_eq!(r.get(Regime::ErodedFull), r.get(Regime::ErodedNoBackground));
        assert!(r.table(&[]).contains("er no bk"));
        assert!(r.key_values().contains("full.oa = "));
    }
}
