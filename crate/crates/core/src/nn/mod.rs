//! Minimal layer library with hand-written backward passes.
//!
//! Forward passes return a [`Tape`] holding whatever the backward pass needs,
//! so several forward passes through one network can be alive at once (the
//! distribution-matching term runs the extractor on real and generated
//! inputs within the same step).

mod conv;
mod norm;

pub use conv::{Conv2d, ConvTranspose2d};
pub use norm::BatchNorm2d;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a forward pass treats normalization layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left alone (a frozen module
    /// inside someone else's training step).
    Frozen,
    /// Running statistics.
    Eval,
}

/// A named parameter array with its gradient accumulator.
///
/// Non-trainable entries (normalization running statistics) have an empty
/// gradient and are skipped by optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: &str, shape: &[usize], value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![T::zero(); value.len()],
            value,
            trainable: true,
        }
    }

    pub fn buffer(name: &str, shape: &[usize], value: Vec<T>) -> Self {
        Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
            grad: Vec::new(),
            trainable: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// `U(−b, b)` with `b = √(3 / fan_in)`, i.e. unit-variance-preserving
/// fan-in scaling.
pub(crate) fn fan_in_uniform<T: Scalar, R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu(a) => {
                if v > T::zero() {
                    v
                } else {
                    v * T::of(a)
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
        }
    }

    /// Derivative given the saved input (rectifiers) or output (sigmoid).
    fn derivative<T: Scalar>(self, saved: T) -> T {
        match self {
            Activation::Relu => {
                if saved > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(a) => {
                if saved > T::zero() {
                    T::one()
                } else {
                    T::of(a)
                }
            }
            Activation::Sigmoid => saved * (T::one() - saved),
        }
    }

    fn saves_output(self) -> bool {
        matches!(self, Activation::Sigmoid)
    }
}

/// Fully connected layer; weight layout `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Param::new(
                "weight",
                &[out_features, in_features],
                fan_in_uniform(rng, in_features * out_features, in_features),
            ),
            bias: Param::new("bias", &[out_features], fan_in_uniform(rng, out_features, in_features)),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.sample_len() != self.in_features || x.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "linear({}→{}) got input {:?}",
                self.in_features,
                self.out_features,
                x.shape()
            )));
        }
        let n = x.batch();
        let mut out = Tensor::zeros(&[n, self.out_features]);
        for s in 0..n {
            out.sample_mut(s).copy_from_slice(&self.bias.value);
        }
        T::gemm(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            &self.weight.value,
            true,
            out.data_mut(),
            true,
        );
        Ok(out)
    }

    fn backward(&mut self, input: &Tensor<T>, grad_out: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let n = input.batch();
        if param_grads {
            T::gemm(
                self.out_features,
                n,
                self.in_features,
                grad_out.data(),
                true,
                input.data(),
                false,
                &mut self.weight.grad,
                true,
            );
            for s in 0..n {
                for (g, &d) in self.bias.grad.iter_mut().zip(grad_out.sample(s)) {
                    *g += d;
                }
            }
        }
        let mut grad_in = Tensor::zeros(input.shape());
        T::gemm(
            n,
            self.out_features,
            self.in_features,
            grad_out.data(),
            false,
            &self.weight.value,
            false,
            grad_in.data_mut(),
            false,
        );
        grad_in
    }
}

/// One stage of a [`Sequential`] network.
#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Linear(Linear<T>),
    Activation(Activation),
    /// Reshapes each sample to the given shape (e.g. flatten to `[p]`).
    Reshape(Vec<usize>),
}

enum Cache<T> {
    Conv { cols: Vec<T>, in_shape: Vec<usize> },
    Input(Tensor<T>),
    Norm(norm::NormCache<T>),
    Saved(Tensor<T>),
    Shape(Vec<usize>),
}

/// Intermediate state of one forward pass, consumed by [`Sequential::backward`].
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::ConvTranspose(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta, &b.running_mean, &b.running_var],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Activation(_) | Layer::Reshape(_) => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::ConvTranspose(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta, &mut b.running_mean, &mut b.running_var],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Activation(_) | Layer::Reshape(_) => vec![],
        }
    }

    /// Short tag used in parameter names and architecture manifests.
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::ConvTranspose(_) => "convt",
            Layer::BatchNorm(_) => "bn",
            Layer::Linear(_) => "linear",
            Layer::Activation(_) => "act",
            Layer::Reshape(_) => "reshape",
        }
    }

    pub fn output_shape(&self, sample: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(c) => c.output_shape(sample),
            Layer::ConvTranspose(c) => c.output_shape(sample),
            Layer::BatchNorm(b) => match sample {
                [c, _, _] if *c == b.channels => Ok(sample.to_vec()),
                s => Err(Error::invalid(format!("batchnorm2d sample shape {s:?}"))),
            },
            Layer::Linear(l) => {
                if sample.iter().product::<usize>() == l.in_features && sample.len() == 1 {
                    Ok(vec![l.out_features])
                } else {
                    Err(Error::invalid(format!("linear sample shape {sample:?}")))
                }
            }
            Layer::Activation(_) => Ok(sample.to_vec()),
            Layer::Reshape(to) => {
                if to.iter().product::<usize>() == sample.iter().product::<usize>() {
                    Ok(to.clone())
                } else {
                    Err(Error::invalid(format!("cannot reshape {sample:?} to {to:?}")))
                }
            }
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => c.forward(x).map(|(y, _)| y),
            Layer::ConvTranspose(c) => c.forward(x),
            Layer::BatchNorm(b) => b.infer(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Activation(a) => Ok(x.map(|v| a.apply(v))),
            Layer::Reshape(to) => reshape_batch(x.clone(), to),
        }
    }

    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        Ok(match self {
            Layer::Conv(c) => {
                let (y, cols) = c.forward(&x)?;
                (
                    y,
                    Cache::Conv {
                        cols,
                        in_shape: x.shape().to_vec(),
                    },
                )
            }
            Layer::ConvTranspose(c) => (c.forward(&x)?, Cache::Input(x)),
            Layer::BatchNorm(b) => {
                let (y, cache) = b.forward(&x, mode)?;
                (y, Cache::Norm(cache))
            }
            Layer::Linear(l) => (l.forward(&x)?, Cache::Input(x)),
            Layer::Activation(a) => {
                let y = x.map(|v| a.apply(v));
                if a.saves_output() {
                    (y.clone(), Cache::Saved(y))
                } else {
                    (y, Cache::Saved(x))
                }
            }
            Layer::Reshape(to) => {
                let in_shape = x.shape().to_vec();
                (reshape_batch(x, to)?, Cache::Shape(in_shape))
            }
        })
    }

    fn backward(&mut self, cache: &Cache<T>, grad: Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv { cols, in_shape }) => c.backward(cols, in_shape, &grad, param_grads),
            (Layer::ConvTranspose(c), Cache::Input(x)) => c.backward(x, &grad, param_grads),
            (Layer::BatchNorm(b), Cache::Norm(nc)) => b.backward(nc, &grad, param_grads),
            (Layer::Linear(l), Cache::Input(x)) => Ok(l.backward(x, &grad, param_grads)),
            (Layer::Activation(a), Cache::Saved(s)) => {
                let mut g = grad;
                for (gv, &sv) in g.data_mut().iter_mut().zip(s.data()) {
                    *gv *= a.derivative(sv);
                }
                Ok(g)
            }
            (Layer::Reshape(_), Cache::Shape(shape)) => grad.reshape(shape),
            _ => Err(Error::invalid("tape does not belong to this network")),
        }
    }
}

fn reshape_batch<T: Scalar>(x: Tensor<T>, sample: &[usize]) -> Result<Tensor<T>> {
    let mut shape = vec![x.batch()];
    shape.extend_from_slice(sample);
    x.reshape(&shape)
}

/// A feed-forward chain of layers.
#[derive(Clone, Debug)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    /// Inference-mode forward pass; borrows immutably so it can run from
    /// several threads at once.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.infer(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &mut self.layers {
            let (y, c) = l.forward(cur, mode)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, Tape { caches }))
    }

    /// Back-propagates `grad` (same shape as the forward output) and returns
    /// the gradient with respect to the forward input. Parameter gradients
    /// are accumulated only when `param_grads` is set.
    pub fn backward(&mut self, tape: &Tape<T>, grad: Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::invalid("tape length does not match network depth"));
        }
        let mut g = grad;
        for (l, c) in self.layers.iter_mut().zip(&tape.caches).rev() {
            g = l.backward(c, g, param_grads)?;
        }
        Ok(g)
    }

    /// Per-layer output shapes (one sample) for an input sample shape.
    pub fn output_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        for l in &self.layers {
            cur = l.output_shape(&cur)?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }

    /// `(qualified name, parameter)` pairs, names like `"3.convt.weight"`.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let kind = l.kind();
                l.params()
                    .into_iter()
                    .map(move |p| (format!("{i}.{kind}.{}", p.name), p))
            })
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params().filter(|p| p.trainable).map(Param::len).sum()
    }

    /// Element count of the full state, running statistics included.
    pub fn state_count(&self) -> usize {
        self.params().map(Param::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Plain gradient-descent step on trainable parameters.
    pub fn sgd_step(&mut self, lr: T) {
        for p in self.params_mut().filter(|p| p.trainable) {
            for (v, &g) in p.value.iter_mut().zip(&p.grad) {
                *v -= lr * g;
            }
        }
    }

    /// All state values concatenated in parameter order.
    pub fn flat_state(&self) -> Vec<T> {
        self.params().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<T> {
        self.params()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter().copied())
            .collect()
    }

    /// Overwrites all state values from a flat vector in parameter order.
    pub fn load_flat_state(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.state_count() {
            return Err(Error::invalid(format!(
                "state vector has {} elements, network holds {}",
                flat.len(),
                self.state_count()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Layer-by-layer structural signature; equal signatures mean states can
    /// be averaged elementwise.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.named_params()
            .into_iter()
            .map(|(n, p)| (n, p.shape.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_and_grad(y: &Tensor<f64>, target: &[f64]) -> (f64, Tensor<f64>) {
        let mut g = y.clone();
        let mut l = 0.0;
        for (gv, (&yv, &t)) in g.data_mut().iter_mut().zip(y.data().iter().zip(target)) {
            l += 0.5 * (yv - t) * (yv - t);
            *gv = yv - t;
        }
        (l, g)
    }

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks input and parameter gradients of `net` against central
    /// differences of a squared-error loss.
    fn gradcheck(mut net: Sequential<f64>, x: Tensor<f64>, mode: Mode) {
        let (y, tape) = net.forward(&x, mode).unwrap();
        let target: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.31).sin()).collect();
        let (_, gy) = loss_and_grad(&y, &target);
        net.zero_grad();
        let gx = net.backward(&tape, gy, true).unwrap();
        let h = 1e-5;
        let eval = |n: &mut Sequential<f64>, x: &Tensor<f64>| {
            // Frozen keeps running statistics fixed across probes
            let m = if mode == Mode::Train { Mode::Frozen } else { mode };
            let (y, _) = n.forward(x, m).unwrap();
            loss_and_grad(&y, &target).0
        };
        for i in (0..x.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&mut net, &xp) - eval(&mut net, &xm)) / (2.0 * h);
            let an = gx.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input {i}: fd {fd} vs {an}");
        }
        let grads = net.flat_grads();
        let trainable: Vec<(usize, usize)> = net
            .params()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, p)| (i, p.len()))
            .collect();
        let mut offset = 0;
        for (pi, len) in trainable {
            for j in (0..len).step_by(5) {
                let bump = |n: &mut Sequential<f64>, d: f64| {
                    n.params_mut().nth(pi).unwrap().value[j] += d;
                };
                bump(&mut net, h);
                let lp = eval(&mut net, &x);
                bump(&mut net, -2.0 * h);
                let lm = eval(&mut net, &x);
                bump(&mut net, h);
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[offset + j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pi}[{j}]: fd {fd} vs {an}"
                );
            }
            offset += len;
        }
    }

    #[test]
    fn conv_stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new(2, 3, 3, 2, 1, &mut rng)),
            Layer::Activation(Activation::LeakyRelu(0.01)),
            Layer::Conv(Conv2d::new(3, 2, 3, 1, 1, &mut rng)),
            Layer::Reshape(vec![2 * 4 * 4]),
            Layer::Linear(Linear::new(32, 4, &mut rng)),
            Layer::Activation(Activation::Sigmoid),
        ]);
        gradcheck(net, input(&[2, 2, 8, 8], 2), Mode::Train);
    }

    #[test]
    fn decoder_stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Sequential::new(vec![
            Layer::Reshape(vec![3, 2, 2]),
            Layer::ConvTranspose(ConvTranspose2d::new(3, 4, 3, 1, 1, &mut rng)),
            Layer::BatchNorm(BatchNorm2d::new(4)),
            Layer::Activation(Activation::LeakyRelu(0.01)),
            Layer::ConvTranspose(ConvTranspose2d::new(4, 1, 4, 2, 1, &mut rng)),
            Layer::BatchNorm(BatchNorm2d::new(1)),
            Layer::Activation(Activation::Sigmoid),
        ]);
        gradcheck(net.clone(), input(&[3, 12], 6), Mode::Train);
        gradcheck(net, input(&[3, 12], 7), Mode::Eval);
    }

    #[test]
    fn train_mode_updates_running_stats_but_frozen_does_not() {
        let mut net = Sequential::<f64>::new(vec![Layer::BatchNorm(BatchNorm2d::new(2))]);
        let x = input(&[4, 2, 3, 3], 9);
        let before = net.flat_state();
        net.forward(&x, Mode::Frozen).unwrap();
        assert_eq!(net.flat_state(), before);
        net.forward(&x, Mode::Train).unwrap();
        assert_ne!(net.flat_state(), before);
    }

    #[test]
    fn flat_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Sequential::<f32>::new(vec![
            Layer::Linear(Linear::new(3, 2, &mut rng)),
            Layer::Activation(Activation::Relu),
        ]);
        let s = net.flat_state();
        assert_eq!(s.len(), 8);
        let doubled: Vec<f32> = s.iter().map(|v| v * 2.0).collect();
        net.load_flat_state(&doubled).unwrap();
        assert_eq!(net.flat_state(), doubled);
        assert!(net.load_flat_state(&s[..3]).is_err());
    }
}
