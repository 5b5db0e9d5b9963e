//! Dense 4-D tensors and the shape, padding and interpolation primitives the
//! rest of the engine is built on.
//!
//! Layout is fixed: batch-major, then channel, then row, then column. Element
//! `(n, c, y, x)` lives at `((n * channels + c) * height + y) * width + x`.
//! Checkpoints and every kernel rely on this order.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

static DETERMINISTIC: AtomicBool = AtomicBool::new(true);

/// Forces every parallel code path to reproduce the sequential result.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// Floating point element type. `f32` drives the engine, `f64` exists for
/// gradient checking.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// `c = alpha * a · b + beta * c` on strided row/column-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative gemm stride");
    let last = (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize;
    assert!(last < len, "gemm operand out of bounds: {last} >= {len}");
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel was bounds-checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Extent of a 4-D tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements per batch sample.
    pub fn sample_len(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

/// The engine's working tensor type.
pub type Tensor4 = Tensor<f32>;

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        assert!(
            shape.batch >= 1 && shape.channels >= 1 && shape.height >= 1 && shape.width >= 1,
            "tensor dimensions must be >= 1, got {shape}"
        );
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.batch == 0 || shape.channels == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::Shape(format!("zero-sized dimension in {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let mut i = 0;
        for n in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        t.data[i] = f(n, c, y, x);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.shape.batch && c < self.shape.channels);
        debug_assert!(y < self.shape.height && x < self.shape.width);
        ((n * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Plane `(n, c)` as a row-major `height × width` slice.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &mut self.data[start..start + p]
    }

    /// Same data, new extent.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a * b)
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Left-to-right sum.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn max(&self) -> T {
        self.data
            .iter()
            .fold(T::neg_infinity(), |acc, &v| if v > acc { v } else { acc })
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-pixel channel argmax, ties to the lowest channel index. Result is
    /// `batch × height × width`, row-major.
    pub fn argmax_channels(&self) -> Vec<usize> {
        let s = self.shape;
        let p = s.plane();
        let mut out = vec![0usize; s.batch * p];
        for n in 0..s.batch {
            for i in 0..p {
                let mut best = 0;
                let mut best_v = self.data[n * s.sample_len() + i];
                for c in 1..s.channels {
                    let v = self.data[(n * s.channels + c) * p + i];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                out[n * p + i] = best;
            }
        }
        out
    }

    /// Copies the spatial window `[y0, y0+h) × [x0, x0+w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if y0 + h > s.height || x0 + w > s.width || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop {h}x{w}@({y0},{x0}) outside {s}"
            )));
        }
        let mut out = Tensor::zeros(Shape::new(s.batch, s.channels, h, w));
        for n in 0..s.batch {
            for c in 0..s.channels {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..h {
                    let row = (y0 + y) * s.width + x0;
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[row..row + w]);
                }
            }
        }
        Ok(out)
    }

    /// Writes `src` into this tensor with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &Self, y0: usize, x0: usize) -> Result<()> {
        let s = self.shape;
        let t = src.shape;
        if t.batch != s.batch
            || t.channels != s.channels
            || y0 + t.height > s.height
            || x0 + t.width > s.width
        {
            return Err(Error::Shape(format!("paste {t}@({y0},{x0}) into {s}")));
        }
        for n in 0..s.batch {
            for c in 0..s.channels {
                let from = src.plane(n, c);
                let w = s.width;
                let dst = self.plane_mut(n, c);
                for y in 0..t.height {
                    let row = (y0 + y) * w + x0;
                    dst[row..row + t.width].copy_from_slice(&from[y * t.width..(y + 1) * t.width]);
                }
            }
        }
        Ok(())
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.len() * parts.len());
        let mut batch = 0;
        for p in parts {
            let t = p.shape;
            if (t.channels, t.height, t.width) != (s.channels, s.height, s.width) {
                return Err(Error::Shape(format!("stack {t} with {s}")));
            }
            data.extend_from_slice(&p.data);
            batch += t.batch;
        }
        Self::from_vec(Shape::new(batch, s.channels, s.height, s.width), data)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

/// Surrounds every plane with `z` rows and columns of zeros.
pub fn pad_zero<T: Scalar>(t: &Tensor<T>, z: usize) -> Tensor<T> {
    if z == 0 {
        return t.clone();
    }
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(s.batch, s.channels, s.height + 2 * z, s.width + 2 * z));
    out.paste(t, z, z).expect("padded tensor always contains its source");
    out
}

/// Maps an out-of-range coordinate back into `[0, n)` by mirroring about the
/// edge pixels (`-1 -> 1`, `n -> n-2`). Works for any overshoot.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Mirror padding with independent amounts per side.
pub fn pad_reflect<T: Scalar>(
    t: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Tensor<T> {
    let s = t.shape();
    let h = s.height + top + bottom;
    let w = s.width + left + right;
    let rows: Vec<usize> = (0..h)
        .map(|y| reflect_index(y as isize - top as isize, s.height))
        .collect();
    let cols: Vec<usize> = (0..w)
        .map(|x| reflect_index(x as isize - left as isize, s.width))
        .collect();
    let mut out = Tensor::zeros(Shape::new(s.batch, s.channels, h, w));
    for n in 0..s.batch {
        for c in 0..s.channels {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (y, &sy) in rows.iter().enumerate() {
                for (x, &sx) in cols.iter().enumerate() {
                    dst[y * w + x] = src[sy * s.width + sx];
                }
            }
        }
    }
    out
}

/// Linear interpolation weights for sampling `n_in` anchors at `n_out`
/// positions. Anchor `i` sits at output coordinate `offset + i * step`;
/// positions outside the outermost anchors clamp to them.
fn interp_axis(n_in: usize, n_out: usize, offset: f64, step: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 {
                return (0, 0, 0.0);
            }
            let u = ((o as f64 - offset) / step).clamp(0.0, (n_in - 1) as f64);
            let i0 = (u.floor() as usize).min(n_in - 2);
            (i0, i0 + 1, u - i0 as f64)
        })
        .collect()
}

fn resample<T: Scalar>(
    t: &Tensor<T>,
    rows: &[(usize, usize, f64)],
    cols: &[(usize, usize, f64)],
) -> Tensor<T> {
    let s = t.shape();
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Tensor::zeros(Shape::new(s.batch, s.channels, oh, ow));
    for n in 0..s.batch {
        for c in 0..s.channels {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let a = src[y0 * s.width + x0];
                    let b = src[y0 * s.width + x1];
                    let cc = src[y1 * s.width + x0];
                    let d = src[y1 * s.width + x1];
                    let top = if fx == T::zero() { a } else { a + (b - a) * fx };
                    let bot = if fx == T::zero() { cc } else { cc + (d - cc) * fx };
                    dst[y * ow + x] = if fy == T::zero() { top } else { top + (bot - top) * fy };
                }
            }
        }
    }
    out
}

/// Per-channel bilinear resize on a corner-aligned grid: source corners land
/// exactly on destination corners.
pub fn bilinear_resize<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    assert!(out_h >= 1 && out_w >= 1, "resize target must be >= 1x1");
    let s = t.shape();
    let step = |n_in: usize, n_out: usize| {
        if n_out > 1 && n_in > 1 {
            (n_out - 1) as f64 / (n_in - 1) as f64
        } else {
            1.0
        }
    };
    let rows = interp_axis(s.height, out_h, 0.0, step(s.height, out_h));
    let cols = interp_axis(s.width, out_w, 0.0, step(s.width, out_w));
    resample(t, &rows, &cols)
}

/// Bilinear upsampling of a coarse grid whose point `i` is anchored at
/// full-resolution pixel `offset + i * step`; pixels beyond the outermost
/// anchors take the edge value.
pub fn anchored_upsample<T: Scalar>(
    t: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    offset: f64,
    step: f64,
) -> Tensor<T> {
    let s = t.shape();
    let rows = interp_axis(s.height, out_h, offset, step);
    let cols = interp_axis(s.width, out_w, offset, step);
    resample(t, &rows, &cols)
}
