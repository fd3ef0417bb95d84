//! Heterogeneous local classifiers and the shared transposed-convolution
//! decoder.
//!
//! Every local model is `head ∘ extractor`. Extractors differ per
//! architecture cluster (depth and width) but all end in a
//! `latent.0 × latent.1 × latent.2` feature map which is flattened into the
//! `p`-dimensional latent vector; the flattening point is the output of the
//! extractor's last convolution, before any activation. The head is a single
//! linear map `p → C`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ClassId, PrototypeMap};
use crate::nn::{Activation, BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Linear, Mode, Sequential};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input, latent and decoder geometry of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    /// `[channels, height, width]` of one input sample.
    pub input: [usize; 3],
    /// `[channels, height, width]` the latent vector is reshaped to.
    pub latent: [usize; 3],
    pub classes: usize,
    /// Output channels of decoder blocks 1..3 (block 4 emits `input[0]`).
    pub decoder_channels: [usize; 3],
}

impl DatasetProfile {
    /// 1×28×28 digits, latent 20×7×7 (p = 980), decoder widths 16/32/32.
    pub fn mnist() -> Self {
        DatasetProfile {
            name: "mnist".into(),
            input: [1, 28, 28],
            latent: [20, 7, 7],
            classes: 10,
            decoder_channels: [16, 32, 32],
        }
    }

    /// A small single-channel 16×16 profile with p = 128 for fast tests.
    pub fn tiny(classes: usize) -> Self {
        DatasetProfile {
            name: "tiny".into(),
            input: [1, 16, 16],
            latent: [8, 4, 4],
            classes,
            decoder_channels: [8, 8, 8],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(Self::mnist()),
            "tiny" => Ok(Self::tiny(10)),
            other => Err(Error::Config(format!("unknown dataset profile {other:?}"))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.iter().product()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.iter().product()
    }

    /// Checks that `p` factors into the latent reshape and that two
    /// resolution doublings lead from the latent grid to the input grid.
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.latent_dim() != p {
            return Err(Error::Config(format!(
                "latent dimension {p} does not factor into {:?} (= {})",
                self.latent,
                self.latent_dim()
            )));
        }
        let [_, h, w] = self.input;
        let [_, lh, lw] = self.latent;
        if h != 4 * lh || w != 4 * lw {
            return Err(Error::Config(format!(
                "input {h}×{w} is not four times the latent grid {lh}×{lw}"
            )));
        }
        if self.classes == 0 || self.input[0] == 0 || self.latent[0] == 0 {
            return Err(Error::Config("profile has a zero-sized dimension".into()));
        }
        Ok(())
    }
}

/// One extractor family. Cluster `i` (1-based) has `i + 1` convolution
/// blocks and base width `6 + 2i`, so both depth and parameter count grow
/// with the id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchCluster {
    pub id: usize,
    pub depth: usize,
    pub width: usize,
}

impl ArchCluster {
    pub fn new(id: usize) -> Result<Self> {
        if id == 0 {
            return Err(Error::Config("cluster ids start at 1".into()));
        }
        Ok(ArchCluster {
            id,
            depth: id + 1,
            width: 6 + 2 * id,
        })
    }

    /// Clusters `1..=n`.
    pub fn zoo(n: usize) -> Result<Vec<Self>> {
        (1..=n).map(Self::new).collect()
    }

    /// Cluster of client `k` when `K` clients are spread uniformly over
    /// `n` clusters (contiguous blocks of ids).
    pub fn for_client(client: usize, clients: usize, n: usize) -> Result<Self> {
        if n == 0 || clients == 0 {
            return Err(Error::Config("need at least one cluster and one client".into()));
        }
        Self::new(client * n / clients + 1)
    }
}

/// `head ∘ extractor`.
#[derive(Clone, Debug)]
pub struct LocalModel<T> {
    pub arch: ArchCluster,
    pub extractor: Sequential<T>,
    pub head: Sequential<T>,
    pub latent_dim: usize,
    pub classes: usize,
}

/// Builds a local classifier for `arch`, deterministically from `seed`.
pub fn build_local_model<T: Scalar>(
    arch: ArchCluster,
    profile: &DatasetProfile,
    p: usize,
    seed: u64,
) -> Result<LocalModel<T>> {
    profile.validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c_in, _, _] = profile.input;
    let c_lat = profile.latent[0];
    let w = arch.width;
    let mut layers = vec![
        Layer::Conv(Conv2d::new(c_in, w, 3, 2, 1, &mut rng)),
        Layer::Activation(Activation::Relu),
    ];
    for _ in 0..arch.depth.saturating_sub(2) {
        layers.push(Layer::Conv(Conv2d::new(w, w, 3, 1, 1, &mut rng)));
        layers.push(Layer::Activation(Activation::Relu));
    }
    layers.push(Layer::Conv(Conv2d::new(w, c_lat, 3, 2, 1, &mut rng)));
    layers.push(Layer::Reshape(vec![p]));
    let extractor = Sequential::new(layers);
    let head = Sequential::new(vec![Layer::Linear(Linear::new(p, profile.classes, &mut rng))]);
    let model = LocalModel {
        arch,
        extractor,
        head,
        latent_dim: p,
        classes: profile.classes,
    };
    let shapes = model.extractor.output_shapes(&profile.input)?;
    debug_assert_eq!(shapes.last(), Some(&vec![p]));
    Ok(model)
}

impl<T: Scalar> LocalModel<T> {
    pub fn param_count(&self) -> usize {
        self.extractor.trainable_count() + self.head.trainable_count()
    }

    /// Latent features of a batch of images.
    pub fn extract(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.extractor.infer(x)
    }

    /// Class scores of a batch of images.
    pub fn scores(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.head.infer(&self.extractor.infer(x)?)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<ClassId>> {
        let s = self.scores(x)?;
        Ok(s.samples().map(argmax).collect())
    }

    pub fn zero_grad(&mut self) {
        self.extractor.zero_grad();
        self.head.zero_grad();
    }

    pub fn sgd_step(&mut self, lr: T) {
        self.extractor.sgd_step(lr);
        self.head.sgd_step(lr);
    }

    pub fn flat_state(&self) -> Vec<T> {
        let mut v = self.extractor.flat_state();
        v.extend(self.head.flat_state());
        v
    }

    /// One cross-entropy gradient step on a labelled batch; returns the
    /// mean loss before the update.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[ClassId], lr: T) -> Result<T> {
        self.zero_grad();
        let (z, tape_g) = self.extractor.forward(x, Mode::Train)?;
        let (s, tape_h) = self.head.forward(&z, Mode::Train)?;
        let (loss, grad) = cross_entropy_batch(&s, labels)?;
        let dz = self.head.backward(&tape_h, grad, true)?;
        self.extractor.backward(&tape_g, dz, true)?;
        self.sgd_step(lr);
        Ok(loss)
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> ClassId {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The variational transposed-convolution decoder: four upsampling blocks
/// (strides 1, 2, 1, 2), each transposed convolution followed by batch
/// normalization, LeakyReLU(0.01) on the first three blocks and a sigmoid
/// on the last.
#[derive(Clone, Debug)]
pub struct VtcDecoder<T> {
    pub net: Sequential<T>,
    pub latent: [usize; 3],
    pub output: [usize; 3],
}

pub fn build_vtc_decoder<T: Scalar>(profile: &DatasetProfile, p: usize, seed: u64) -> Result<VtcDecoder<T>> {
    profile.validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c1, c2, c3] = profile.decoder_channels;
    let c_lat = profile.latent[0];
    let c_out = profile.input[0];
    let block = |rng: &mut ChaCha8Rng, cin, cout, k, s, act| {
        vec![
            Layer::ConvTranspose(ConvTranspose2d::new(cin, cout, k, s, 1, rng)),
            Layer::BatchNorm(BatchNorm2d::new(cout)),
            Layer::Activation(act),
        ]
    };
    let leaky = Activation::LeakyRelu(0.01);
    let mut layers = vec![Layer::Reshape(profile.latent.to_vec())];
    layers.extend(block(&mut rng, c_lat, c1, 3, 1, leaky));
    layers.extend(block(&mut rng, c1, c2, 4, 2, leaky));
    layers.extend(block(&mut rng, c2, c3, 3, 1, leaky));
    layers.extend(block(&mut rng, c3, c_out, 4, 2, Activation::Sigmoid));
    let net = Sequential::new(layers);
    let out = net.output_shapes(&[p])?;
    if out.last().map(Vec::as_slice) != Some(&profile.input[..]) {
        return Err(Error::Config(format!(
            "decoder produces {:?}, profile expects {:?}",
            out.last(),
            profile.input
        )));
    }
    Ok(VtcDecoder {
        net,
        latent: profile.latent,
        output: profile.input,
    })
}

impl<T: Scalar> VtcDecoder<T> {
    pub fn latent_dim(&self) -> usize {
        self.latent.iter().product()
    }

    /// Decodes a `[n, p]` batch with running normalization statistics.
    pub fn generate(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.infer(v)
    }

    pub fn param_count(&self) -> usize {
        self.net.trainable_count()
    }

    /// Elements exchanged when the decoder is transmitted: every parameter
    /// plus the normalization running statistics.
    pub fn state_count(&self) -> usize {
        self.net.state_count()
    }
}

/// Cross-entropy of one score vector against a label, computed with a
/// shifted log-sum-exp.
pub fn classification_loss<T: Scalar>(scores: &[T], label: ClassId) -> Result<T> {
    if label >= scores.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            scores.len()
        )));
    }
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + scores.iter().map(|&s| (s - m).exp()).sum::<T>().ln();
    Ok(lse - scores[label])
}

/// Mean cross-entropy over a `[n, C]` batch and its gradient w.r.t. the scores.
pub fn cross_entropy_batch<T: Scalar>(scores: &Tensor<T>, labels: &[ClassId]) -> Result<(T, Tensor<T>)> {
    let n = scores.batch();
    if labels.len() != n || n == 0 {
        return Err(Error::invalid(format!("{} labels for a batch of {n}", labels.len())));
    }
    let inv_n = T::one() / T::of_usize(n);
    let mut grad = scores.clone();
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let s = scores.sample(i);
        total += classification_loss(s, y)?;
        let m = s.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = s.iter().map(|&v| (v - m).exp()).sum();
        for (j, g) in grad.sample_mut(i).iter_mut().enumerate() {
            let prob = (s[j] - m).exp() / denom;
            let onehot = if j == y { T::one() } else { T::zero() };
            *g = (prob - onehot) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Per-class mean of extractor outputs over a labelled image set. Classes
/// without samples are absent from the result.
pub fn local_prototypes<T: Scalar>(
    model: &LocalModel<T>,
    images: &Tensor<T>,
    labels: &[ClassId],
) -> Result<PrototypeMap<T>> {
    if images.batch() != labels.len() {
        return Err(Error::invalid(format!(
            "{} images but {} labels",
            images.batch(),
            labels.len()
        )));
    }
    let p = model.latent_dim;
    let mut sums: PrototypeMap<T> = PrototypeMap::new();
    let mut counts = std::collections::BTreeMap::<ClassId, usize>::new();
    const CHUNK: usize = 256;
    let sample_shape = images.sample_shape().to_vec();
    for start in (0..labels.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(labels.len());
        let batch = Tensor::stack(&sample_shape, (start..end).map(|i| images.sample(i)))?;
        let z = model.extract(&batch)?;
        for (row, &y) in z.samples().zip(&labels[start..end]) {
            let acc = sums.entry(y).or_insert_with(|| vec![T::zero(); p]);
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
            *counts.entry(y).or_default() += 1;
        }
    }
    for (y, acc) in sums.iter_mut() {
        let n = T::of_usize(counts[y]);
        acc.iter_mut().for_each(|v| *v /= n);
    }
    Ok(sums)
}
