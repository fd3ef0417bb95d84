use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::server::RoundMessage;
use super::synth::SyntheticDataset;
use super::RunConfig;
use crate::datapart::DatasetBundle;
use crate::error::{Error, Result};
use crate::math::{vtc_objective, ClassId, LossBreakdown, PrototypeMap, StdVec, VtcSample};
use crate::modelzoo::{cross_entropy_batch, local_prototypes, LocalModel, VtcDecoder};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything one client owns.
#[derive(Clone, Debug)]
pub struct ClientState<T> {
    pub id: usize,
    pub model: LocalModel<T>,
    pub decoder: VtcDecoder<T>,
    pub sigma: StdVec<T>,
    /// Indices into the training split.
    pub shard: Vec<usize>,
    /// `Y_k`.
    pub classes: BTreeSet<ClassId>,
    /// Prototypes computed at the end of the last local round.
    pub prototypes: PrototypeMap<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(
        id: usize,
        model: LocalModel<T>,
        decoder: VtcDecoder<T>,
        shard: Vec<usize>,
        labels: &[ClassId],
        seed: u64,
    ) -> Self {
        let p = model.latent_dim;
        ClientState {
            id,
            classes: shard.iter().map(|&i| labels[i]).collect(),
            model,
            decoder,
            sigma: StdVec::ones(p),
            shard,
            prototypes: PrototypeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// What a client sends back after local training.
#[derive(Clone, Debug)]
pub struct ClientUpload<T> {
    pub client: usize,
    pub prototypes: PrototypeMap<T>,
    pub sigma: StdVec<T>,
    /// Decoder objective averaged over the round's minibatches.
    pub loss: LossBreakdown<f64>,
    /// Mean classification loss over the round's minibatches.
    pub classification: f64,
}

fn non_finite(ctx: String, breakdown: &LossBreakdown<impl Scalar>, ce: f64) -> Error {
    Error::NonFinite {
        context: ctx,
        breakdown: format!("{breakdown}, classification={ce:.6e}"),
    }
}

fn gather<T: Scalar>(x: &Tensor<T>, y: &[ClassId], idx: &[usize]) -> Result<(Tensor<T>, Vec<ClassId>)> {
    let shape = x.sample_shape().to_vec();
    Ok((
        Tensor::stack(&shape, idx.iter().map(|&i| x.sample(i)))?,
        idx.iter().map(|&i| y[i]).collect(),
    ))
}

fn perturb<T: Scalar>(z: &Tensor<T>, sigma: &[T], eps: &[T]) -> Tensor<T> {
    let mut v = z.clone();
    for (row, e) in v.data_mut().chunks_mut(sigma.len()).zip(eps.chunks(sigma.len())) {
        for ((vi, &s), &ei) in row.iter_mut().zip(sigma).zip(e) {
            *vi += s * ei;
        }
    }
    v
}

fn samples<'a, T>(
    labels: &[ClassId],
    x: &'a Tensor<T>,
    z: &'a Tensor<T>,
    x_gen: &'a Tensor<T>,
    z_gen: Option<&'a Tensor<T>>,
) -> Vec<VtcSample<'a, T>>
where
    T: Scalar,
{
    labels
        .iter()
        .enumerate()
        .map(|(i, &class)| VtcSample {
            class,
            x: x.sample(i),
            z: z.sample(i),
            x_gen: x_gen.sample(i),
            z_gen: z_gen.map(|t| t.sample(i)),
        })
        .collect()
}

/// One local round: σ is reset to the broadcast value, then for `E` epochs
/// every minibatch runs
///
/// * step A: decoder and σ frozen, the classifier takes one step on
///   cross-entropy (scaled by `learning_rate`) plus the decoder objective
///   (scaled by `tc_learning_rate`; the reconstruction gradient
///   reaches the extractor through the frozen decoder, the matching term
///   through the extractor re-applied to the fixed generated images);
/// * step B: classifier frozen, decoder and σ take one `tc_learning_rate`
///   step on the decoder objective, with the matching term back-propagated through the frozen
///   extractor into the generated images.
///
/// Both steps reuse the same noise draw. Classes without a broadcast
/// prototype fall back to the client's own prototypes.
pub fn client_local_round<T: Scalar>(
    client: &mut ClientState<T>,
    msg: &RoundMessage<T>,
    bundle: &DatasetBundle<T>,
    config: &RunConfig,
) -> Result<ClientUpload<T>> {
    if msg.sigma.len() != client.model.latent_dim {
        return Err(Error::Protocol(format!(
            "client {} received a spread of length {}, expected {}",
            client.id,
            msg.sigma.len(),
            client.model.latent_dim
        )));
    }
    client.sigma = msg.sigma.clone();
    let (x_all, y_all) = bundle.train_batch(&client.shard)?;
    let mut targets = local_prototypes(&client.model, &x_all, &y_all)?;
    targets.extend(msg.prototypes.iter().map(|(&y, c)| (y, c.clone())));

    let lr = T::of(config.learning_rate);
    let tlr = T::of(config.tc_learning_rate);
    let lambda = T::of(config.effective_lambda());
    let use_dm = config.effective_lambda() > 0.0;
    let p = client.model.latent_dim;
    let mut order: Vec<usize> = (0..y_all.len()).collect();
    let mut loss_sum = LossBreakdown::<f64>::default();
    let mut ce_sum = 0.0;
    let mut steps = 0usize;

    for epoch in 0..config.local_epochs {
        order.shuffle(&mut client.rng);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let ctx = || format!("client {} epoch {epoch} batch {b}", client.id);
            let (x, y) = gather(&x_all, &y_all, idx)?;
            let n = y.len();
            let eps: Vec<T> = (0..n * p)
                .map(|_| T::of(client.rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let model = &mut client.model;
            let decoder = &mut client.decoder;

            // step A
            model.zero_grad();
            let (z, tape_g) = model.extractor.forward(&x, Mode::Train)?;
            let (scores, tape_h) = model.head.forward(&z, Mode::Train)?;
            let (ce, dscores) = cross_entropy_batch(&scores, &y)?;
            let v = perturb(&z, &client.sigma, &eps);
            let (x_gen, tape_d) = decoder.net.forward(&v, Mode::Frozen)?;
            let gen = if use_dm {
                Some(model.extractor.forward(&x_gen, Mode::Train)?)
            } else {
                None
            };
            let batch = samples(&y, &x, &z, &x_gen, gen.as_ref().map(|g| &g.0));
            let (loss_a, grads) = vtc_objective(&batch, &targets, &client.sigma, lambda)?;
            if !loss_a.is_finite() || !ce.is_finite() {
                return Err(non_finite(format!("{} step A", ctx()), &loss_a, ce.as_f64()));
            }
            // one step of size `step` realizing lr·∇L + tlr·∇L_tc
            let (ce_scale, tc_scale, step) = if lr > T::zero() {
                (T::one(), tlr / lr, lr)
            } else {
                (T::zero(), T::one(), tlr)
            };
            let mut dscores = dscores;
            dscores.data_mut().iter_mut().for_each(|g| *g *= ce_scale);
            let mut dz = model.head.backward(&tape_h, dscores, true)?;
            let dx_gen = Tensor::from_vec(x_gen.shape(), grads.x_gen)?;
            let dv = decoder.net.backward(&tape_d, dx_gen, false)?;
            for ((d, &a), &b) in dz.data_mut().iter_mut().zip(&grads.z).zip(dv.data()) {
                *d += tc_scale * (a + b);
            }
            if let Some((_, tape_gen)) = &gen {
                let mut dzg = Tensor::from_vec(&[n, p], grads.z_gen)?;
                dzg.data_mut().iter_mut().for_each(|g| *g *= tc_scale);
                model.extractor.backward(tape_gen, dzg, true)?;
            }
            model.extractor.backward(&tape_g, dz, true)?;
            model.sgd_step(step);

            // step B
            let z = model.extractor.infer(&x)?;
            let v = perturb(&z, &client.sigma, &eps);
            decoder.net.zero_grad();
            let (x_gen, tape_d) = decoder.net.forward(&v, Mode::Train)?;
            let gen = if use_dm {
                Some(model.extractor.forward(&x_gen, Mode::Train)?)
            } else {
                None
            };
            let batch = samples(&y, &x, &z, &x_gen, gen.as_ref().map(|g| &g.0));
            let (loss_b, grads) = vtc_objective(&batch, &targets, &client.sigma, lambda)?;
            if !loss_b.is_finite() {
                return Err(non_finite(format!("{} step B", ctx()), &loss_b, ce.as_f64()));
            }
            let mut dx_gen = Tensor::from_vec(x_gen.shape(), grads.x_gen)?;
            if let Some((_, tape_gen)) = &gen {
                let dzg = Tensor::from_vec(&[n, p], grads.z_gen)?;
                let back = model.extractor.backward(tape_gen, dzg, false)?;
                dx_gen.add_assign(&back);
            }
            let dv = decoder.net.backward(&tape_d, dx_gen, true)?;
            let mut dsigma = grads.sigma;
            for (dv_row, e_row) in dv.data().chunks(p).zip(eps.chunks(p)) {
                for ((g, &a), &e) in dsigma.iter_mut().zip(dv_row).zip(e_row) {
                    *g += a * e;
                }
            }
            decoder.net.sgd_step(tlr);
            client.sigma = StdVec::floored(client.sigma.iter().zip(&dsigma).map(|(&s, &g)| s - tlr * g).collect());

            let l = loss_b.to_f64();
            loss_sum.reconstruction += l.reconstruction;
            loss_sum.kl += l.kl;
            loss_sum.dm += l.dm;
            loss_sum.total += l.total;
            ce_sum += ce.as_f64();
            steps += 1;
        }
    }

    client.prototypes = local_prototypes(&client.model, &x_all, &y_all)?;
    let div = steps.max(1) as f64;
    Ok(ClientUpload {
        client: client.id,
        prototypes: client.prototypes.clone(),
        sigma: client.sigma.clone(),
        loss: LossBreakdown {
            reconstruction: loss_sum.reconstruction / div,
            kl: loss_sum.kl / div,
            dm: loss_sum.dm / div,
            total: loss_sum.total / div,
        },
        classification: ce_sum / div,
    })
}

/// One pass of minibatch cross-entropy steps over the synthetic set;
/// returns the mean pre-update loss.
pub fn fine_tune_epoch<T: Scalar, R: Rng>(
    model: &mut LocalModel<T>,
    synth: &SyntheticDataset<T>,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64> {
    if synth.labels.is_empty() {
        return Err(Error::Generation("cannot fine-tune on an empty synthetic set".into()));
    }
    let mut order: Vec<usize> = (0..synth.labels.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut steps = 0;
    for idx in order.chunks(batch_size.max(1)) {
        let (x, y) = gather(&synth.images, &synth.labels, idx)?;
        let loss = model.train_step(&x, &y, T::of(lr))?.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "fine-tuning".into(),
                breakdown: format!("classification={loss:.6e}"),
            });
        }
        total += loss;
        steps += 1;
    }
    Ok(total / steps as f64)
}

/// `rounds` fine-tuning passes; returns each pass's mean loss.
pub fn fine_tune<T: Scalar, R: Rng>(
    model: &mut LocalModel<T>,
    synth: &SyntheticDataset<T>,
    rounds: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    (0..rounds)
        .map(|_| fine_tune_epoch(model, synth, lr, batch_size, rng))
        .collect()
}
