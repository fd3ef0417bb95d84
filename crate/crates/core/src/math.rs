//! Loss functions and sampling rules for training the variational decoder.
//!
//! Everything here is a pure function of its inputs. Batch-level losses use
//! class-grouped normalization: each class present in the batch contributes
//! the mean over its own samples, and the per-class means are summed. This
//! is not a global batch mean; gradient magnitudes scale with the number of
//! classes present.

use std::collections::BTreeMap;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Zero-based class label.
pub type ClassId = usize;

/// Floor applied to standard deviations before taking logarithms and after
/// every gradient step on σ.
pub const SIGMA_MIN: f64 = 1e-6;

/// A point in the latent (feature) space of dimension `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVec<T>(pub Vec<T>);

impl<T> Deref for LatentVec<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// Diagonal standard deviation of the latent Gaussian. Entries never drop
/// below [`SIGMA_MIN`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StdVec<T>(Vec<T>);

impl<T: Scalar> StdVec<T> {
    /// Rejects non-finite entries and entries below [`SIGMA_MIN`].
    pub fn new(values: Vec<T>) -> Result<Self> {
        let floor = T::of(SIGMA_MIN);
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < floor) {
            return Err(Error::Domain(format!(
                "sigma[{i}] = {v} is below the floor {SIGMA_MIN}"
            )));
        }
        Ok(StdVec(values))
    }

    /// Clamps every entry up to [`SIGMA_MIN`] (NaN becomes the floor).
    pub fn floored(mut values: Vec<T>) -> Self {
        let floor = T::of(SIGMA_MIN);
        for v in &mut values {
            if !(*v >= floor) {
                *v = floor;
            }
        }
        StdVec(values)
    }

    pub fn ones(p: usize) -> Self {
        StdVec(vec![T::one(); p])
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for StdVec<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// Class prototypes (per-class mean latent vectors), keyed by class.
pub type PrototypeMap<T> = BTreeMap<ClassId, Vec<T>>;

/// Components of the decoder objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub reconstruction: T,
    pub kl: T,
    pub dm: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    /// The negative-ELBO part, `reconstruction + kl`.
    pub fn elbo(&self) -> T {
        self.reconstruction + self.kl
    }

    pub fn is_finite(&self) -> bool {
        self.reconstruction.is_finite() && self.kl.is_finite() && self.dm.is_finite() && self.total.is_finite()
    }

    pub fn to_f64(&self) -> LossBreakdown<f64> {
        LossBreakdown {
            reconstruction: self.reconstruction.as_f64(),
            kl: self.kl.as_f64(),
            dm: self.dm.as_f64(),
            total: self.total.as_f64(),
        }
    }
}

impl<T: Scalar> std::fmt::Display for LossBreakdown<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "reconstruction={:e} kl={:e} dm={:e} total={:e}",
            self.reconstruction, self.kl, self.dm, self.total
        )
    }
}

fn same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: length {a} vs {b}")));
    }
    Ok(())
}

fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&u, &v)| (u - v) * (u - v)).sum()
}

/// `‖x_gen − x‖²` over all elements.
pub fn reconstruction_loss<T: Scalar>(x_gen: &Tensor<T>, x: &Tensor<T>) -> Result<T> {
    if x_gen.shape() != x.shape() {
        return Err(Error::invalid(format!(
            "reconstruction: shapes {:?} and {:?} differ",
            x_gen.shape(),
            x.shape()
        )));
    }
    Ok(squared_distance(x_gen.data(), x.data()))
}

fn log_floored<T: Scalar>(s: T) -> T {
    s.max(T::of(SIGMA_MIN)).ln()
}

/// The σ-only part of the KL term, `½(Σσᵢ² − p − 2Σ log σᵢ)`.
fn kl_sigma_part<T: Scalar>(sigma: &[T]) -> T {
    let half = T::of(0.5);
    let p = T::of_usize(sigma.len());
    let tr: T = sigma.iter().map(|&s| s * s).sum();
    let logdet: T = sigma.iter().map(|&s| log_floored(s)).sum::<T>() * T::of(2.0);
    half * (tr - p - logdet)
}

fn check_sigma<T: Scalar>(sigma: &[T]) -> Result<()> {
    match sigma.iter().position(|s| !(*s > T::zero())) {
        Some(i) => Err(Error::Domain(format!("sigma[{i}] = {} is not positive", sigma[i]))),
        None => Ok(()),
    }
}

/// KL divergence `KL(N(z, diag σ²) ‖ N(c, I))`:
/// `½[‖z − c‖² + Σσᵢ² − p − 2Σ log σᵢ]`, with σ floored at [`SIGMA_MIN`]
/// inside the logarithm.
pub fn kl_gaussian<T: Scalar>(z: &[T], c: &[T], sigma: &[T]) -> Result<T> {
    same_len("kl_gaussian z/c", z.len(), c.len())?;
    same_len("kl_gaussian z/sigma", z.len(), sigma.len())?;
    check_sigma(sigma)?;
    Ok(T::of(0.5) * squared_distance(z, c) + kl_sigma_part(sigma))
}

/// `v = z + σ ⊙ ε`. The noise comes from the caller so this stays
/// deterministic; σ is taken as a plain slice so a zero scale can be used.
pub fn reparameterize<T: Scalar>(z: &[T], sigma: &[T], noise: &[T]) -> Result<LatentVec<T>> {
    same_len("reparameterize z/sigma", z.len(), sigma.len())?;
    same_len("reparameterize z/noise", z.len(), noise.len())?;
    Ok(LatentVec(
        z.iter().zip(sigma).zip(noise).map(|((&m, &s), &e)| m + s * e).collect(),
    ))
}

/// One real sample with its latent and its reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct ElboSample<'a, T> {
    pub class: ClassId,
    pub x: &'a [T],
    pub z: &'a [T],
    pub x_gen: &'a [T],
}

fn class_weights<T: Scalar>(classes: impl Iterator<Item = ClassId>) -> BTreeMap<ClassId, T> {
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for c in classes {
        *counts.entry(c).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(c, n)| (c, T::one() / T::of_usize(n)))
        .collect()
}

fn prototype<T>(prototypes: &PrototypeMap<T>, class: ClassId) -> Result<&[T]> {
    prototypes
        .get(&class)
        .map(Vec::as_slice)
        .ok_or(Error::MissingPrototype(class))
}

/// Negative ELBO: per class, the mean over that class's samples of
/// `‖x_gen − x‖² + KL(z, c^y, σ)`, summed over the classes present.
pub fn elbo_loss<T: Scalar>(
    batch: &[ElboSample<'_, T>],
    prototypes: &PrototypeMap<T>,
    sigma: &[T],
) -> Result<LossBreakdown<T>> {
    check_sigma(sigma)?;
    let weights = class_weights::<T>(batch.iter().map(|s| s.class));
    let sigma_part = kl_sigma_part(sigma);
    let mut rc = T::zero();
    let mut kl = T::zero();
    for s in batch {
        let c = prototype(prototypes, s.class)?;
        same_len("elbo x/x_gen", s.x.len(), s.x_gen.len())?;
        same_len("elbo z/prototype", s.z.len(), c.len())?;
        same_len("elbo z/sigma", s.z.len(), sigma.len())?;
        let w = weights[&s.class];
        rc += w * squared_distance(s.x_gen, s.x);
        kl += w * (T::of(0.5) * squared_distance(s.z, c) + sigma_part);
    }
    Ok(LossBreakdown {
        reconstruction: rc,
        kl,
        dm: T::zero(),
        total: rc + kl,
    })
}

/// Distribution-matching loss: per class, the mean squared distance between
/// the extractor's features of generated samples and the class prototype,
/// summed over classes.
pub fn dm_loss<T: Scalar>(latents: &[(ClassId, &[T])], prototypes: &PrototypeMap<T>) -> Result<T> {
    let weights = class_weights::<T>(latents.iter().map(|(c, _)| *c));
    let mut total = T::zero();
    for (class, z) in latents {
        let c = prototype(prototypes, *class)?;
        same_len("dm latent/prototype", z.len(), c.len())?;
        total += weights[class] * squared_distance(z, c);
    }
    Ok(total)
}

/// `total = reconstruction + kl + λ·dm`; with λ = 0 the ELBO breakdown comes
/// back unchanged apart from the recorded `dm` value.
pub fn vtc_loss<T: Scalar>(elbo: &LossBreakdown<T>, dm: T, lambda: T) -> Result<LossBreakdown<T>> {
    if !(lambda >= T::zero()) {
        return Err(Error::invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    if !(dm >= T::zero()) {
        return Err(Error::invalid(format!("dm loss must be nonnegative, got {dm}")));
    }
    Ok(LossBreakdown {
        reconstruction: elbo.reconstruction,
        kl: elbo.kl,
        dm,
        total: elbo.elbo() + lambda * dm,
    })
}

/// One sample as seen by the full decoder objective. `z_gen` is the
/// extractor output on `x_gen`; leave it `None` to drop the DM term.
#[derive(Clone, Copy, Debug)]
pub struct VtcSample<'a, T> {
    pub class: ClassId,
    pub x: &'a [T],
    pub z: &'a [T],
    pub x_gen: &'a [T],
    pub z_gen: Option<&'a [T]>,
}

/// Partial derivatives of the decoder objective, laid out sample-major.
///
/// `z` and `sigma` hold only the direct (KL) dependence; the paths through
/// `v = z + σ⊙ε` and the decoder are chained by the caller from `x_gen`
/// and `z_gen`.
#[derive(Clone, Debug, PartialEq)]
pub struct VtcGrads<T> {
    pub z: Vec<T>,
    pub sigma: Vec<T>,
    pub x_gen: Vec<T>,
    pub z_gen: Vec<T>,
}

/// Loss and gradients of `L_e + λ·L_dm` for one batch.
pub fn vtc_objective<T: Scalar>(
    batch: &[VtcSample<'_, T>],
    prototypes: &PrototypeMap<T>,
    sigma: &[T],
    lambda: T,
) -> Result<(LossBreakdown<T>, VtcGrads<T>)> {
    check_sigma(sigma)?;
    if !(lambda >= T::zero()) {
        return Err(Error::invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let p = sigma.len();
    let d = batch.first().map_or(0, |s| s.x.len());
    let weights = class_weights::<T>(batch.iter().map(|s| s.class));
    let sigma_part = kl_sigma_part(sigma);
    let two = T::of(2.0);
    let mut grads = VtcGrads {
        z: vec![T::zero(); batch.len() * p],
        sigma: vec![T::zero(); p],
        x_gen: vec![T::zero(); batch.len() * d],
        z_gen: vec![T::zero(); batch.len() * p],
    };
    let mut out = LossBreakdown::default();
    let mut weight_sum = T::zero();
    for (i, s) in batch.iter().enumerate() {
        let c = prototype(prototypes, s.class)?;
        same_len("vtc x/x_gen", s.x.len(), s.x_gen.len())?;
        same_len("vtc x/d", s.x.len(), d)?;
        same_len("vtc z/prototype", s.z.len(), c.len())?;
        same_len("vtc z/sigma", s.z.len(), p)?;
        let w = weights[&s.class];
        weight_sum += w;
        out.reconstruction += w * squared_distance(s.x_gen, s.x);
        out.kl += w * (T::of(0.5) * squared_distance(s.z, c) + sigma_part);
        for ((g, &a), &b) in grads.x_gen[i * d..(i + 1) * d].iter_mut().zip(s.x_gen).zip(s.x) {
            *g = two * w * (a - b);
        }
        for ((g, &a), &b) in grads.z[i * p..(i + 1) * p].iter_mut().zip(s.z).zip(c) {
            *g = w * (a - b);
        }
        if let Some(zg) = s.z_gen {
            same_len("vtc z_gen/prototype", zg.len(), p)?;
            out.dm += w * squared_distance(zg, c);
            for ((g, &a), &b) in grads.z_gen[i * p..(i + 1) * p].iter_mut().zip(zg).zip(c) {
                *g = lambda * two * w * (a - b);
            }
        }
    }
    let floor = T::of(SIGMA_MIN);
    for (g, &s) in grads.sigma.iter_mut().zip(sigma) {
        // d/dσ ½(σ² − 2 log max(σ, floor))
        let dlog = if s > floor { T::one() / s } else { T::zero() };
        *g = weight_sum * (s - dlog);
    }
    out.total = out.reconstruction + out.kl + lambda * out.dm;
    Ok((out, grads))
}
