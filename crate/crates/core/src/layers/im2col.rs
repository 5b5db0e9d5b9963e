//! Patch unrolling shared by convolution and deconvolution.
//!
//! For a single sample of `channels × height × width`, the column matrix has
//! `channels * kernel * kernel` rows and `out_h * out_w` columns. Row
//! `(c, ky, kx)` holds input `(c, oy*stride - pad + ky, ox*stride - pad + kx)`
//! for every output position, zero where that falls in the padding.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Unroll {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Unroll {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output positions `o` with `o*stride - pad + k` inside `[0, n)`.
    #[inline]
    fn valid_range(&self, k: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= n-1
        let hi_num = n as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).clamp(0, n_out as isize) as usize;
        (lo.min(hi), hi)
    }
}

pub fn im2col<T: Scalar>(x: &[T], u: &Unroll, cols: &mut [T]) {
    debug_assert_eq!(x.len(), u.channels * u.height * u.width);
    debug_assert_eq!(cols.len(), u.rows() * u.cols());
    let ncols = u.cols();
    for c in 0..u.channels {
        let plane = &x[c * u.height * u.width..(c + 1) * u.height * u.width];
        for ky in 0..u.kernel {
            let (oy_lo, oy_hi) = u.valid_range(ky, u.height, u.out_h);
            for kx in 0..u.kernel {
                let (ox_lo, ox_hi) = u.valid_range(kx, u.width, u.out_w);
                let row = (c * u.kernel + ky) * u.kernel + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                dst.iter_mut().for_each(|v| *v = T::zero());
                // A kernel column can miss the input entirely when pad is large.
                if ox_lo == ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * u.stride + ky - u.pad;
                    let src_row = &plane[iy * u.width..(iy + 1) * u.width];
                    let dst_row = &mut dst[oy * u.out_w..(oy + 1) * u.out_w];
                    if u.stride == 1 {
                        let ix0 = ox_lo + kx - u.pad;
                        let n = ox_hi - ox_lo;
                        dst_row[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + n]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst_row[ox] = src_row[ox * u.stride + kx - u.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds the column matrix back onto the image (adjoint of [`im2col`]).
pub fn col2im<T: Scalar>(cols: &[T], u: &Unroll, x: &mut [T]) {
    debug_assert_eq!(x.len(), u.channels * u.height * u.width);
    debug_assert_eq!(cols.len(), u.rows() * u.cols());
    let ncols = u.cols();
    for c in 0..u.channels {
        let plane = &mut x[c * u.height * u.width..(c + 1) * u.height * u.width];
        for ky in 0..u.kernel {
            let (oy_lo, oy_hi) = u.valid_range(ky, u.height, u.out_h);
            for kx in 0..u.kernel {
                let (ox_lo, ox_hi) = u.valid_range(kx, u.width, u.out_w);
                let row = (c * u.kernel + ky) * u.kernel + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                if ox_lo == ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * u.stride + ky - u.pad;
                    let dst_row = &mut plane[iy * u.width..(iy + 1) * u.width];
                    let src_row = &src[oy * u.out_w..(oy + 1) * u.out_w];
                    if u.stride == 1 {
                        let ix0 = ox_lo + kx - u.pad;
                        let n = ox_hi - ox_lo;
                        for (d, &v) in dst_row[ix0..ix0 + n].iter_mut().zip(&src_row[ox_lo..ox_hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst_row[ox * u.stride + kx - u.pad] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Writes the transpose of the row-major `rows × cols` matrix `src` into `dst`.
pub fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_im2col(x: &[f64], u: &Unroll) -> Vec<f64> {
        let mut out = vec![0.0; u.rows() * u.cols()];
        for c in 0..u.channels {
            for ky in 0..u.kernel {
                for kx in 0..u.kernel {
                    let row = (c * u.kernel + ky) * u.kernel + kx;
                    for oy in 0..u.out_h {
                        for ox in 0..u.out_w {
                            let iy = (oy * u.stride + ky) as isize - u.pad as isize;
                            let ix = (ox * u.stride + kx) as isize - u.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < u.height && (ix as usize) < u.width {
                                out[row * u.cols() + oy * u.out_w + ox] =
                                    x[(c * u.height + iy as usize) * u.width + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_and_is_adjoint() {
        for &(h, w, k, s, p) in &[(5, 5, 3, 1, 1), (7, 6, 3, 2, 1), (4, 4, 5, 1, 2), (9, 9, 7, 2, 3), (3, 3, 1, 1, 0), (1, 1, 7, 1, 6), (2, 3, 5, 2, 4)] {
            let out_h = (h + 2 * p - k) / s + 1;
            let out_w = (w + 2 * p - k) / s + 1;
            let u = Unroll { channels: 2, height: h, width: w, kernel: k, stride: s, pad: p, out_h, out_w };
            let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut cols = vec![0.0; u.rows() * u.cols()];
            im2col(&x, &u, &mut cols);
            assert_eq!(cols, naive_im2col(&x, &u));

            let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut back = vec![0.0; x.len()];
            col2im(&y, &u, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }
}
