//! Max and average spatial pooling.
//!
//! Output size is `floor((n - P + 2z) / s) + 1`. Padding cells never win a
//! max and never count toward an average's denominator. Max ties go to the
//! first cell in row-major window order.

use super::{expect_shape, missing_cache, Context, Geometry, Layer};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PoolMode,
}

impl PoolSpec {
    /// 3×3, stride 2, one cell of padding: 65 → 33 → 17 → 9 → 5.
    pub fn downsample(mode: PoolMode) -> Self {
        PoolSpec {
            window: 3,
            stride: 2,
            pad: 1,
            mode,
        }
    }

    pub fn out_size(&self, n: usize) -> Result<usize> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config(format!("degenerate pool {self:?}")));
        }
        if self.pad >= self.window {
            return Err(Error::Config(format!(
                "pool padding {} must be smaller than window {}",
                self.pad, self.window
            )));
        }
        let span = n + 2 * self.pad;
        if span < self.window {
            return Err(Error::Shape(format!(
                "pool window {} larger than padded input {span}",
                self.window
            )));
        }
        Ok((span - self.window) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(Shape::new(
            input.batch,
            input.channels,
            self.out_size(input.height)?,
            self.out_size(input.width)?,
        ))
    }

    /// Input index range covered by output position `o` along an axis of length `n`.
    #[inline]
    fn span(&self, o: usize, n: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.window as isize).max(0) as usize).min(n);
        (lo, hi)
    }
}

/// Forward pass. In max mode also returns, per output element, the flat
/// in-plane index of the selected input cell.
pub fn pool_forward<T: Scalar>(x: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    let out_shape = spec.output_shape(s)?;
    let mut y = Tensor::zeros(out_shape);
    let mut argmax = match spec.mode {
        PoolMode::Max => vec![0u32; out_shape.len()],
        PoolMode::Average => Vec::new(),
    };
    let (oh, ow) = (out_shape.height, out_shape.width);
    let mut k = 0;
    for n in 0..s.batch {
        for c in 0..s.channels {
            let src = x.plane(n, c);
            let base = (n * s.channels + c) * oh * ow;
            for oy in 0..oh {
                let (y0, y1) = spec.span(oy, s.height);
                for ox in 0..ow {
                    let (x0, x1) = spec.span(ox, s.width);
                    let v = match spec.mode {
                        PoolMode::Max => {
                            let mut best = y0 * s.width + x0;
                            let mut best_v = src[best];
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    let i = iy * s.width + ix;
                                    if src[i] > best_v {
                                        best_v = src[i];
                                        best = i;
                                    }
                                }
                            }
                            argmax[k] = best as u32;
                            best_v
                        }
                        PoolMode::Average => {
                            let mut acc = T::zero();
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    acc += src[iy * s.width + ix];
                                }
                            }
                            acc / T::from_usize((y1 - y0) * (x1 - x0)).unwrap()
                        }
                    };
                    y.data_mut()[base + oy * ow + ox] = v;
                    k += 1;
                }
            }
        }
    }
    Ok((y, argmax))
}

/// Routes `dy` back: to the recorded argmax cell (max) or evenly over the
/// valid cells of each window (average). Overlapping windows accumulate.
pub fn pool_backward<T: Scalar>(
    dy: &Tensor<T>,
    input_shape: Shape,
    spec: &PoolSpec,
    argmax: Option<&[u32]>,
) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(input_shape)?;
    expect_shape(dy.shape(), out_shape, "pool output gradient")?;
    let mut dx = Tensor::zeros(input_shape);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let (h, w) = (input_shape.height, input_shape.width);
    match spec.mode {
        PoolMode::Max => {
            let idx = argmax.ok_or_else(|| missing_cache("max-pool"))?;
            if idx.len() != out_shape.len() {
                return Err(missing_cache("max-pool"));
            }
            for n in 0..input_shape.batch {
                for c in 0..input_shape.channels {
                    let base = (n * input_shape.channels + c) * oh * ow;
                    let g = &dy.data()[base..base + oh * ow];
                    let sel = &idx[base..base + oh * ow];
                    let dst = dx.plane_mut(n, c);
                    for (gv, &i) in g.iter().zip(sel) {
                        dst[i as usize] += *gv;
                    }
                }
            }
        }
        PoolMode::Average => {
            for n in 0..input_shape.batch {
                for c in 0..input_shape.channels {
                    let base = (n * input_shape.channels + c) * oh * ow;
                    let g = &dy.data()[base..base + oh * ow];
                    let dst = dx.plane_mut(n, c);
                    for oy in 0..oh {
                        let (y0, y1) = spec.span(oy, h);
                        for ox in 0..ow {
                            let (x0, x1) = spec.span(ox, w);
                            let share = g[oy * ow + ox]
                                / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    dst[iy * w + ix] += share;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

#[derive(Clone)]
pub struct Pool2d {
    name: String,
    pub spec: PoolSpec,
    cache: Option<(Shape, Vec<u32>)>,
}

impl Pool2d {
    pub fn new(name: impl Into<String>, spec: PoolSpec) -> Self {
        Pool2d {
            name: name.into(),
            spec,
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Pool2d {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        match self.spec.mode {
            PoolMode::Max => "maxpool",
            PoolMode::Average => "avgpool",
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.spec.output_shape(input)
    }

    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Context<'_>) -> Result<Tensor<T>> {
        let (y, argmax) = pool_forward(x, &self.spec)?;
        if ctx.cache {
            self.cache = Some((x.shape(), argmax));
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, argmax) = self.cache.as_ref().ok_or_else(|| missing_cache("pool"))?;
        pool_backward(dy, *shape, &self.spec, Some(argmax))
    }

    fn geometry(&self) -> Geometry {
        Geometry::Window {
            kernel: self.spec.window,
            stride: self.spec.stride,
            pad: self.spec.pad,
        }
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}
