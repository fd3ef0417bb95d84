use super::{Mode, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch normalization over `[n, c, h, w]` inputs.
///
/// Running statistics are kept as non-trainable parameters so they travel
/// with the weights through averaging and checkpoints.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

pub(crate) struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::new("gamma", &[channels], vec![T::one(); channels]),
            beta: Param::new("beta", &[channels], vec![T::zero(); channels]),
            running_mean: Param::buffer("running_mean", &[channels], vec![T::zero(); channels]),
            running_var: Param::buffer("running_var", &[channels], vec![T::one(); channels]),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        match x.shape() {
            [n, c, h, w] if *c == self.channels => Ok(n * h * w),
            s => Err(Error::invalid(format!(
                "batchnorm2d({}) got input {s:?}",
                self.channels
            ))),
        }
    }

    /// Normalizes with running statistics; no cache, no mutation.
    pub(crate) fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let eps = T::of(self.eps);
        let plane: usize = x.shape()[2..].iter().product();
        let mut out = x.clone();
        for s in 0..x.batch() {
            for (c, p) in out.sample_mut(s).chunks_mut(plane).enumerate() {
                let inv = T::one() / (self.running_var.value[c] + eps).sqrt();
                let (m, g, b) = (self.running_mean.value[c], self.gamma.value[c], self.beta.value[c]);
                p.iter_mut().for_each(|v| *v = g * (*v - m) * inv + b);
            }
        }
        Ok(out)
    }

    pub(crate) fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, NormCache<T>)> {
        let count = self.check(x)?;
        let plane: usize = x.shape()[2..].iter().product();
        let eps = T::of(self.eps);
        let (mean, var) = if mode == Mode::Eval {
            (self.running_mean.value.clone(), self.running_var.value.clone())
        } else {
            if count < 2 {
                return Err(Error::invalid("batch statistics need at least two values per channel"));
            }
            let mut mean = vec![T::zero(); self.channels];
            let mut var = vec![T::zero(); self.channels];
            for s in 0..x.batch() {
                for (c, p) in x.sample(s).chunks(plane).enumerate() {
                    mean[c] += p.iter().copied().sum::<T>();
                }
            }
            let cnt = T::of_usize(count);
            mean.iter_mut().for_each(|m| *m /= cnt);
            for s in 0..x.batch() {
                for (c, p) in x.sample(s).chunks(plane).enumerate() {
                    var[c] += p.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= cnt);
            if mode == Mode::Train {
                let mo = T::of(self.momentum);
                let unbias = cnt / (cnt - T::one());
                for c in 0..self.channels {
                    let rm = &mut self.running_mean.value[c];
                    *rm = (T::one() - mo) * *rm + mo * mean[c];
                    let rv = &mut self.running_var.value[c];
                    *rv = (T::one() - mo) * *rv + mo * var[c] * unbias;
                }
            }
            (mean, var)
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut out = x.clone();
        for s in 0..x.batch() {
            let xs = xhat.sample_mut(s);
            for (c, p) in xs.chunks_mut(plane).enumerate() {
                p.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
            }
            let ys = out.sample_mut(s);
            for (c, (p, q)) in ys.chunks_mut(plane).zip(xhat.sample(s).chunks(plane)).enumerate() {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for (y, &h) in p.iter_mut().zip(q) {
                    *y = g * h + b;
                }
            }
        }
        Ok((
            out,
            NormCache {
                xhat: xhat.into_data(),
                inv_std,
                batch_stats: mode != Mode::Eval,
            },
        ))
    }

    pub(crate) fn backward(
        &mut self,
        cache: &NormCache<T>,
        grad_out: &Tensor<T>,
        param_grads: bool,
    ) -> Result<Tensor<T>> {
        let count = self.check(grad_out)?;
        let plane: usize = grad_out.shape()[2..].iter().product();
        let per_sample = self.channels * plane;
        let n = grad_out.batch();
        // per-channel Σ dy and Σ dy·x̂
        let mut sum_dy = vec![T::zero(); self.channels];
        let mut sum_dy_xhat = vec![T::zero(); self.channels];
        for s in 0..n {
            let xh = &cache.xhat[s * per_sample..(s + 1) * per_sample];
            for (c, (dp, xp)) in grad_out.sample(s).chunks(plane).zip(xh.chunks(plane)).enumerate() {
                for (&d, &h) in dp.iter().zip(xp) {
                    sum_dy[c] += d;
                    sum_dy_xhat[c] += d * h;
                }
            }
        }
        if param_grads {
            for c in 0..self.channels {
                self.gamma.grad[c] += sum_dy_xhat[c];
                self.beta.grad[c] += sum_dy[c];
            }
        }
        let mut grad_in = grad_out.clone();
        let cnt = T::of_usize(count);
        for s in 0..n {
            let xh = &cache.xhat[s * per_sample..(s + 1) * per_sample];
            let gs = grad_in.sample_mut(s);
            for (c, (gp, xp)) in gs.chunks_mut(plane).zip(xh.chunks(plane)).enumerate() {
                let scale = self.gamma.value[c] * cache.inv_std[c];
                if cache.batch_stats {
                    let (mdy, mdyx) = (sum_dy[c] / cnt, sum_dy_xhat[c] / cnt);
                    for (g, &h) in gp.iter_mut().zip(xp) {
                        *g = scale * (*g - mdy - h * mdyx);
                    }
                } else {
                    gp.iter_mut().for_each(|g| *g *= scale);
                }
            }
        }
        Ok(grad_in)
    }
}
