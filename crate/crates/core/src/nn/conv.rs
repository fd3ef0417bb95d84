use rand::Rng;

use super::{fan_in_uniform, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sliding-window geometry of a square-kernel convolution reading a
/// `channels × h × w` image and producing an `oh × ow` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 || kernel == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(Error::invalid(format!(
                "kernel {kernel} stride {stride} padding {padding} does not fit {h}×{w}"
            )));
        }
        Ok(Geometry {
            channels,
            h,
            w,
            kernel,
            stride,
            padding,
            oh: (h + 2 * padding - kernel) / stride + 1,
            ow: (w + 2 * padding - kernel) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn source_index(&self, out: usize, offset: usize, limit: usize) -> Option<usize> {
        let i = (out * self.stride + offset) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }

    /// Output positions `lo..hi` whose source index stays inside `0..limit`.
    fn valid_span(&self, offset: usize, limit: usize, outs: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.padding.saturating_sub(offset).div_ceil(s);
        let hi = if limit + self.padding > offset {
            ((limit - 1 + self.padding - offset) / s + 1).min(outs)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one image into a `(channels·k·k) × (oh·ow)` patch matrix.
pub(crate) fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let n = g.cols();
    let s = g.stride;
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (lo, hi) = g.valid_span(kj, g.w, g.ow);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = g.source_index(oy, ki, g.h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let start = iy * g.w + lo * s + kj - g.padding;
                        let src = &plane[start..];
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[..hi - lo]);
                        } else {
                            for (v, &x) in line[lo..hi].iter_mut().zip(src.iter().step_by(s)) {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back, adding into `x`.
pub(crate) fn col2im<T: Scalar>(g: &Geometry, cols: &[T], x: &mut [T]) {
    let k = g.kernel;
    let n = g.cols();
    let s = g.stride;
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = g.valid_span(kj, g.w, g.ow);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let Some(iy) = g.source_index(oy, ki, g.h) else {
                        continue;
                    };
                    let start = iy * g.w + lo * s + kj - g.padding;
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if s == 1 {
                        for (d, &v) in plane[start..start + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in plane[start..].iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn expect_image(x: &Tensor<impl Scalar>, channels: usize, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        [_, c, h, w] if *c == channels => Ok((*h, *w)),
        s => Err(Error::invalid(format!(
            "{what} expects [n, {channels}, h, w], got {s:?}"
        ))),
    }
}

/// 2-d convolution with square kernels; weight layout `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(
                "weight",
                &[out_channels, in_channels, kernel, kernel],
                fan_in_uniform(rng, out_channels * fan_in, fan_in),
            ),
            bias: Param::new("bias", &[out_channels], fan_in_uniform(rng, out_channels, fan_in)),
        }
    }

    pub(crate) fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        Geometry::new(self.in_channels, h, w, self.kernel, self.stride, self.padding)
    }

    pub fn output_shape(&self, sample: &[usize]) -> Result<Vec<usize>> {
        match sample {
            [c, h, w] if *c == self.in_channels => {
                let g = self.geometry(*h, *w)?;
                Ok(vec![self.out_channels, g.oh, g.ow])
            }
            s => Err(Error::invalid(format!("conv2d input sample shape {s:?}"))),
        }
    }

    /// Returns the output and the per-sample patch matrices for backward.
    pub(crate) fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let (h, w) = expect_image(x, self.in_channels, "conv2d")?;
        let g = self.geometry(h, w)?;
        let n = x.batch();
        let (rows, cols_n) = (g.rows(), g.cols());
        let mut cols = vec![T::zero(); n * rows * cols_n];
        let mut out = Tensor::zeros(&[n, self.out_channels, g.oh, g.ow]);
        for s in 0..n {
            let patch = &mut cols[s * rows * cols_n..(s + 1) * rows * cols_n];
            im2col(&g, x.sample(s), patch);
            let y = out.sample_mut(s);
            for (c, plane) in y.chunks_mut(cols_n).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias.value[c]);
            }
            T::gemm(
                self.out_channels,
                rows,
                cols_n,
                &self.weight.value,
                false,
                patch,
                false,
                y,
                true,
            );
        }
        Ok((out, cols))
    }

    pub(crate) fn backward(
        &mut self,
        cols: &[T],
        in_shape: &[usize],
        grad_out: &Tensor<T>,
        param_grads: bool,
    ) -> Result<Tensor<T>> {
        let g = self.geometry(in_shape[2], in_shape[3])?;
        let n = in_shape[0];
        let (rows, cols_n) = (g.rows(), g.cols());
        let mut grad_in = Tensor::zeros(in_shape);
        let mut dcols = vec![T::zero(); rows * cols_n];
        for s in 0..n {
            let dy = grad_out.sample(s);
            let patch = &cols[s * rows * cols_n..(s + 1) * rows * cols_n];
            if param_grads {
                T::gemm(
                    self.out_channels,
                    cols_n,
                    rows,
                    dy,
                    false,
                    patch,
                    true,
                    &mut self.weight.grad,
                    true,
                );
                for (c, plane) in dy.chunks(cols_n).enumerate() {
                    self.bias.grad[c] += plane.iter().copied().sum::<T>();
                }
            }
            T::gemm(
                rows,
                self.out_channels,
                cols_n,
                &self.weight.value,
                true,
                dy,
                false,
                &mut dcols,
                false,
            );
            col2im(&g, &dcols, grad_in.sample_mut(s));
        }
        Ok(grad_in)
    }
}

/// Transposed 2-d convolution; weight layout `[in, out, k, k]`.
///
/// Output side is `(h − 1)·stride − 2·padding + k`, the adjoint of
/// [`Conv2d`] with the same kernel, stride and padding.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = out_channels * kernel * kernel;
        ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(
                "weight",
                &[in_channels, out_channels, kernel, kernel],
                fan_in_uniform(rng, in_channels * fan_in, fan_in),
            ),
            bias: Param::new("bias", &[out_channels], fan_in_uniform(rng, out_channels, fan_in)),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let grow = |v: usize| ((v.max(1) - 1) * self.stride + self.kernel).checked_sub(2 * self.padding);
        match (grow(h), grow(w)) {
            (Some(oh), Some(ow)) if h > 0 && w > 0 && oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::invalid(format!(
                "transposed conv k{} s{} p{} cannot expand {h}×{w}",
                self.kernel, self.stride, self.padding
            ))),
        }
    }

    /// Geometry of the forward convolution that maps the output back onto the input.
    fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        let (oh, ow) = self.out_hw(h, w)?;
        let g = Geometry::new(self.out_channels, oh, ow, self.kernel, self.stride, self.padding)?;
        debug_assert_eq!((g.oh, g.ow), (h, w));
        Ok(g)
    }

    pub fn output_shape(&self, sample: &[usize]) -> Result<Vec<usize>> {
        match sample {
            [c, h, w] if *c == self.in_channels => {
                let (oh, ow) = self.out_hw(*h, *w)?;
                Ok(vec![self.out_channels, oh, ow])
            }
            s => Err(Error::invalid(format!("conv_transpose2d input sample shape {s:?}"))),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = expect_image(x, self.in_channels, "conv_transpose2d")?;
        let g = self.geometry(h, w)?;
        let n = x.batch();
        let (rows, cols_n) = (g.rows(), g.cols());
        let mut cols = vec![T::zero(); rows * cols_n];
        let mut out = Tensor::zeros(&[n, self.out_channels, g.h, g.w]);
        let plane = g.h * g.w;
        for s in 0..n {
            T::gemm(
                rows,
                self.in_channels,
                cols_n,
                &self.weight.value,
                true,
                x.sample(s),
                false,
                &mut cols,
                false,
            );
            let y = out.sample_mut(s);
            for (c, p) in y.chunks_mut(plane).enumerate() {
                p.iter_mut().for_each(|v| *v = self.bias.value[c]);
            }
            col2im(&g, &cols, y);
        }
        Ok(out)
    }

    pub(crate) fn backward(&mut self, input: &Tensor<T>, grad_out: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let (h, w) = expect_image(input, self.in_channels, "conv_transpose2d")?;
        let g = self.geometry(h, w)?;
        let (rows, cols_n) = (g.rows(), g.cols());
        let plane = g.h * g.w;
        let mut dcols = vec![T::zero(); rows * cols_n];
        let mut grad_in = Tensor::zeros(input.shape());
        for s in 0..input.batch() {
            let dy = grad_out.sample(s);
            im2col(&g, dy, &mut dcols);
            if param_grads {
                T::gemm(
                    self.in_channels,
                    cols_n,
                    rows,
                    input.sample(s),
                    false,
                    &dcols,
                    true,
                    &mut self.weight.grad,
                    true,
                );
                for (c, p) in dy.chunks(plane).enumerate() {
                    self.bias.grad[c] += p.iter().copied().sum::<T>();
                }
            }
            T::gemm(
                self.in_channels,
                rows,
                cols_n,
                &self.weight.value,
                false,
                &dcols,
                false,
                grad_in.sample_mut(s),
                false,
            );
        }
        Ok(grad_in)
    }
}
