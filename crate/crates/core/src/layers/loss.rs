//! Per-pixel softmax and cross-entropy.
//!
//! The loss of a patch is the mean over its valid (non-ignored) pixels; the
//! batch loss is the mean of the patch losses over patches that have at
//! least one valid pixel.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from loss and evaluation.
pub const IGNORE: u8 = u8::MAX;

/// Channel-wise softmax at every pixel, max-subtracted for stability.
pub fn softmax<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let s = scores.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    for n in 0..s.batch {
        let src = scores.sample(n);
        let dst = out.sample_mut(n);
        for i in 0..p {
            let mut m = T::neg_infinity();
            for c in 0..s.channels {
                m = m.max(src[c * p + i]);
            }
            let mut z = T::zero();
            for c in 0..s.channels {
                let e = (src[c * p + i] - m).exp();
                dst[c * p + i] = e;
                z += e;
            }
            for c in 0..s.channels {
                dst[c * p + i] = dst[c * p + i] / z;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct XentOutput<T: Scalar> {
    pub loss: T,
    pub probs: Tensor<T>,
    pub dscores: Tensor<T>,
    /// Pixels that contributed to the loss.
    pub valid: usize,
}

/// `targets` holds one label per pixel in `batch × height × width` order,
/// [`IGNORE`] marking pixels with no target.
pub fn softmax_xent<T: Scalar>(scores: &Tensor<T>, targets: &[u8]) -> Result<XentOutput<T>> {
    let s = scores.shape();
    let p = s.plane();
    if targets.len() != s.batch * p {
        return Err(Error::Shape(format!(
            "{} targets for scores {s}",
            targets.len()
        )));
    }
    let probs = softmax(scores);
    let mut dscores = probs.clone();
    let counts: Vec<usize> = targets
        .chunks(p)
        .map(|t| t.iter().filter(|&&l| l != IGNORE).count())
        .collect();
    let live = counts.iter().filter(|&&c| c > 0).count();
    if live == 0 {
        return Err(Error::Numeric("every target pixel is ignored; loss undefined".into()));
    }
    let live_t = T::from_usize(live).unwrap();
    let mut loss = T::zero();
    for n in 0..s.batch {
        let tgt = &targets[n * p..(n + 1) * p];
        let pr = probs.sample(n);
        let d = dscores.sample_mut(n);
        if counts[n] == 0 {
            d.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let norm = T::from_usize(counts[n]).unwrap() * live_t;
        let mut patch = T::zero();
        for (i, &label) in tgt.iter().enumerate() {
            if label == IGNORE {
                for c in 0..s.channels {
                    d[c * p + i] = T::zero();
                }
                continue;
            }
            let label = label as usize;
            if label >= s.channels {
                return Err(Error::Data(format!(
                    "target class {label} outside 0..{}",
                    s.channels
                )));
            }
            let tiny = T::min_positive_value();
            patch += -(pr[label * p + i].max(tiny)).ln();
            for c in 0..s.channels {
                let onehot = if c == label { T::one() } else { T::zero() };
                d[c * p + i] = (pr[c * p + i] - onehot) / norm;
            }
        }
        loss += patch / T::from_usize(counts[n]).unwrap();
    }
    Ok(XentOutput {
        loss: loss / live_t,
        probs,
        dscores,
        valid: counts.iter().sum(),
    })
}
