//! One-hidden-layer Q-networks viewed as empirical measures over neurons.
//!
//! A network of width `L` computes `f(z) = (1/L) Σ_l β_l φ(α_l · z + c_l)`,
//! the integral of `β φ(α · z + c)` against the empirical measure of its
//! neurons. Mixing two networks' neuron measures mixes their outputs, which
//! is what the fictitious-play average relies on.
//!
//! In-weights are stored feature-major (`in_weights[f * width + l]`) so that
//! changing one input feature shifts every preactivation by a contiguous
//! column.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::ActionGrid;
use crate::scalar::Scalar;

const LANES: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline(always)]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at preactivation `x`; the rectifier uses 0 at the kink.
    #[inline(always)]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neuron<T> {
    pub out_weight: T,
    pub in_weights: Vec<T>,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronMeasure<T> {
    input_dim: usize,
    activation: Activation,
    out_weights: Vec<T>,
    biases: Vec<T>,
    in_weights: Vec<T>,
}

/// Work buffers for gradient accumulation.
#[derive(Clone, Debug)]
pub struct GradScratch<T> {
    pre: Vec<T>,
    delta: Vec<T>,
}

impl<T: Scalar> GradScratch<T> {
    pub fn new(width: usize) -> Self {
        Self {
            pre: vec![T::zero(); width],
            delta: vec![T::zero(); width],
        }
    }
}

/// Gradient of the batch loss, laid out like the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGradients<T> {
    pub out_weights: Vec<T>,
    pub biases: Vec<T>,
    pub in_weights: Vec<T>,
}

impl<T: Scalar> NetGradients<T> {
    pub fn zeros(net: &NeuronMeasure<T>) -> Self {
        Self {
            out_weights: vec![T::zero(); net.out_weights.len()],
            biases: vec![T::zero(); net.biases.len()],
            in_weights: vec![T::zero(); net.in_weights.len()],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.out_weights
            .iter()
            .chain(&self.biases)
            .chain(&self.in_weights)
    }

    pub fn scale(&mut self, s: T) {
        for g in self
            .out_weights
            .iter_mut()
            .chain(&mut self.biases)
            .chain(&mut self.in_weights)
        {
            *g = *g * s;
        }
    }
}

#[inline(always)]
fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// `Σ_l β_l φ(pre_l + shift · dir_l)` with a fixed lane-wise summation order.
#[inline]
fn weighted_sum_shifted<T: Scalar>(
    activation: Activation,
    beta: &[T],
    pre: &[T],
    dir: &[T],
    shift: T,
) -> T {
    let n = beta.len();
    let mut acc = [T::zero(); LANES];
    let body = n - n % LANES;
    match activation {
        Activation::Relu => {
            for ((b, p), d) in beta[..body]
                .chunks_exact(LANES)
                .zip(pre[..body].chunks_exact(LANES))
                .zip(dir[..body].chunks_exact(LANES))
            {
                for k in 0..LANES {
                    acc[k] = acc[k] + b[k] * relu(p[k] + shift * d[k]);
                }
            }
        }
        Activation::Tanh => {
            for ((b, p), d) in beta[..body]
                .chunks_exact(LANES)
                .zip(pre[..body].chunks_exact(LANES))
                .zip(dir[..body].chunks_exact(LANES))
            {
                for k in 0..LANES {
                    acc[k] = acc[k] + b[k] * (p[k] + shift * d[k]).tanh();
                }
            }
        }
    }
    let mut total = acc.iter().fold(T::zero(), |s, &x| s + x);
    for l in body..n {
        total = total + beta[l] * activation.apply(pre[l] + shift * dir[l]);
    }
    total
}

#[inline]
fn weighted_sum<T: Scalar>(activation: Activation, beta: &[T], pre: &[T]) -> T {
    let n = beta.len();
    let mut acc = [T::zero(); LANES];
    let body = n - n % LANES;
    match activation {
        Activation::Relu => {
            for (b, p) in beta[..body]
                .chunks_exact(LANES)
                .zip(pre[..body].chunks_exact(LANES))
            {
                for k in 0..LANES {
                    acc[k] = acc[k] + b[k] * relu(p[k]);
                }
            }
        }
        Activation::Tanh => {
            for (b, p) in beta[..body]
                .chunks_exact(LANES)
                .zip(pre[..body].chunks_exact(LANES))
            {
                for k in 0..LANES {
                    acc[k] = acc[k] + b[k] * p[k].tanh();
                }
            }
        }
    }
    let mut total = acc.iter().fold(T::zero(), |s, &x| s + x);
    for l in body..n {
        total = total + beta[l] * activation.apply(pre[l]);
    }
    total
}

/// `out += a * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

impl<T: Scalar> NeuronMeasure<T> {
    /// Centered uniform initialization: in-weights and biases scaled by
    /// `1/√input_dim`, out-weights by `1/√width`.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        width: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(input_dim >= 1 && width >= 1, "network needs at least one input and one neuron");
        let a = 1.0 / (input_dim as f64).sqrt();
        let b = 1.0 / (width as f64).sqrt();
        let mut draw = |s: f64| T::lit(rng.gen_range(-s..s));
        let in_weights = (0..input_dim * width).map(|_| draw(a)).collect();
        let biases = (0..width).map(|_| draw(a)).collect();
        let out_weights = (0..width).map(|_| draw(b)).collect();
        Self {
            input_dim,
            activation,
            out_weights,
            biases,
            in_weights,
        }
    }

    pub fn from_neurons(activation: Activation, neurons: &[Neuron<T>]) -> Result<Self> {
        let Some(first) = neurons.first() else {
            return Err(Error::InvalidParam {
                name: "neurons",
                reason: "a network needs at least one neuron".into(),
            });
        };
        let input_dim = first.in_weights.len();
        let width = neurons.len();
        let mut in_weights = vec![T::zero(); input_dim * width];
        for (l, n) in neurons.iter().enumerate() {
            if n.in_weights.len() != input_dim {
                return Err(Error::Dimension {
                    expected: input_dim,
                    got: n.in_weights.len(),
                });
            }
            for (f, &a) in n.in_weights.iter().enumerate() {
                in_weights[f * width + l] = a;
            }
        }
        Ok(Self {
            input_dim,
            activation,
            out_weights: neurons.iter().map(|n| n.out_weight).collect(),
            biases: neurons.iter().map(|n| n.bias).collect(),
            in_weights,
        })
    }

    pub fn width(&self) -> usize {
        self.out_weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn out_weights(&self) -> &[T] {
        &self.out_weights
    }

    pub fn biases(&self) -> &[T] {
        &self.biases
    }

    /// Weights of every neuron on input feature `f`.
    #[inline]
    pub fn column(&self, f: usize) -> &[T] {
        let w = self.width();
        &self.in_weights[f * w..(f + 1) * w]
    }

    pub fn neuron(&self, l: usize) -> Neuron<T> {
        let w = self.width();
        Neuron {
            out_weight: self.out_weights[l],
            in_weights: (0..self.input_dim)
                .map(|f| self.in_weights[f * w + l])
                .collect(),
            bias: self.biases[l],
        }
    }

    pub fn neurons(&self) -> impl Iterator<Item = Neuron<T>> + '_ {
        (0..self.width()).map(move |l| self.neuron(l))
    }

    pub fn num_params(&self) -> usize {
        self.out_weights.len() + self.biases.len() + self.in_weights.len()
    }

    pub fn scale_out_weights(&mut self, s: T) {
        for b in &mut self.out_weights {
            *b = *b * s;
        }
    }

    fn check_input(&self, z: &[T]) -> Result<()> {
        if z.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// `α_l · z + c_l` for every neuron, written into `out`.
    pub fn preactivations_into(&self, z: &[T], out: &mut [T]) {
        out.copy_from_slice(&self.biases);
        for (f, &zf) in z.iter().enumerate() {
            if zf != T::zero() {
                axpy(out, zf, self.column(f));
            }
        }
    }

    pub fn preactivations(&self, z: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.width()];
        self.preactivations_into(z, &mut out);
        out
    }

    /// Network output from precomputed preactivations.
    #[inline]
    pub fn readout(&self, pre: &[T]) -> T {
        weighted_sum(self.activation, &self.out_weights, pre) / T::lit(self.width() as f64)
    }

    /// Output after moving input feature `f` by `shift` from the point whose
    /// preactivations are `pre`.
    #[inline]
    pub fn readout_shifted(&self, pre: &[T], f: usize, shift: T) -> T {
        weighted_sum_shifted(self.activation, &self.out_weights, pre, self.column(f), shift)
            / T::lit(self.width() as f64)
    }

    pub fn forward(&self, z: &[T]) -> Result<T> {
        self.check_input(z)?;
        Ok(self.readout(&self.preactivations(z)))
    }

    pub fn forward_batch(&self, inputs: &[Vec<T>]) -> Result<Vec<T>> {
        let mut pre = vec![T::zero(); self.width()];
        inputs
            .iter()
            .map(|z| {
                self.check_input(z)?;
                self.preactivations_into(z, &mut pre);
                Ok(self.readout(&pre))
            })
            .collect()
    }

    /// Mean squared residual `(1/B) Σ (f(z_i) − y_i)²` and its gradient with
    /// the targets held fixed. `inputs` is row-major `B × input_dim`.
    pub fn loss_and_gradients(&self, inputs: &[T], targets: &[T]) -> Result<(T, NetGradients<T>)> {
        let b = targets.len();
        if b == 0 {
            return Err(Error::InvalidParam {
                name: "batch",
                reason: "must not be empty".into(),
            });
        }
        if inputs.len() != b * self.input_dim {
            return Err(Error::Dimension {
                expected: b * self.input_dim,
                got: inputs.len(),
            });
        }
        let mut grads = NetGradients::zeros(self);
        let mut scratch = GradScratch::new(self.width());
        let mut loss = T::zero();
        for (z, &y) in inputs.chunks_exact(self.input_dim).zip(targets) {
            self.preactivations_into(z, &mut scratch.pre);
            let residual = self.readout(&scratch.pre) - y;
            loss = loss + residual * residual;
            let coeff = T::lit(2.0) * residual / T::lit(b as f64);
            self.accumulate_gradient(z, coeff, &mut grads, &mut scratch, true);
        }
        Ok((loss / T::lit(b as f64), grads))
    }

    /// Adds `coeff · ∇f(z)` to `grads`. With `have_pre` the scratch already
    /// holds the preactivations of `z`.
    pub fn accumulate_gradient(
        &self,
        z: &[T],
        coeff: T,
        grads: &mut NetGradients<T>,
        scratch: &mut GradScratch<T>,
        have_pre: bool,
    ) {
        let width = self.width();
        if !have_pre {
            self.preactivations_into(z, &mut scratch.pre);
        }
        let scale = coeff / T::lit(width as f64);
        let GradScratch { pre, delta } = scratch;
        for l in 0..width {
            let x = pre[l];
            grads.out_weights[l] = grads.out_weights[l] + scale * self.activation.apply(x);
            delta[l] = scale * self.out_weights[l] * self.activation.derivative(x);
            grads.biases[l] = grads.biases[l] + delta[l];
        }
        for (f, &zf) in z.iter().enumerate() {
            if zf != T::zero() {
                axpy(&mut grads.in_weights[f * width..(f + 1) * width], zf, delta);
            }
        }
    }

    /// Gradient of the mean squared residual over `(input, target)` pairs.
    pub fn gradients(&self, batch: &[(Vec<T>, T)]) -> Result<NetGradients<T>> {
        let mut inputs = Vec::with_capacity(batch.len() * self.input_dim);
        for (z, _) in batch {
            self.check_input(z)?;
            inputs.extend_from_slice(z);
        }
        let targets: Vec<T> = batch.iter().map(|(_, y)| *y).collect();
        Ok(self.loss_and_gradients(&inputs, &targets)?.1)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.out_weights
            .iter_mut()
            .chain(&mut self.biases)
            .chain(&mut self.in_weights)
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.out_weights
            .iter()
            .chain(&self.biases)
            .chain(&self.in_weights)
    }

    /// Parameter `i` in the flattened order out-weights, biases, in-weights.
    pub fn param_mut(&mut self, i: usize) -> &mut T {
        let w = self.width();
        if i < w {
            &mut self.out_weights[i]
        } else if i < 2 * w {
            &mut self.biases[i - w]
        } else {
            &mut self.in_weights[i - 2 * w]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> NeuronMeasure<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect();
        NeuronMeasure {
            input_dim: self.input_dim,
            activation: self.activation,
            out_weights: c(&self.out_weights),
            biases: c(&self.biases),
            in_weights: c(&self.in_weights),
        }
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub step: u64,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(num_params: usize, learning_rate: T) -> Self {
        Self {
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
            step: 0,
            first_moment: vec![T::zero(); num_params],
            second_moment: vec![T::zero(); num_params],
        }
    }

    pub fn for_net(net: &NeuronMeasure<T>, learning_rate: T) -> Self {
        Self::new(net.num_params(), learning_rate)
    }

    pub fn reset(&mut self, num_params: usize) {
        self.step = 0;
        self.first_moment = vec![T::zero(); num_params];
        self.second_moment = vec![T::zero(); num_params];
    }

    pub fn num_params(&self) -> usize {
        self.first_moment.len()
    }

    pub fn step(&mut self, net: &mut NeuronMeasure<T>, grads: &NetGradients<T>) -> Result<()> {
        if net.num_params() != self.first_moment.len() {
            return Err(Error::Dimension {
                expected: self.first_moment.len(),
                got: net.num_params(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        for (((p, &g), m), v) in net
            .params_mut()
            .zip(grads.iter())
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// How two neuron measures are mixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AveragingMode {
    /// Keep every neuron of both networks with rescaled out-weights; the
    /// output is exactly the weighted average of the two outputs.
    #[default]
    ExactConcat,
    /// Fixed width: each neuron drawn i.i.d. from the mixture measure.
    Resample,
    /// Fixed width, equal-width inputs: slot `l` keeps the old network's
    /// neuron `l` with probability `weight_old`, otherwise the new one's.
    Paired,
}

/// Fictitious-play mixture `weight_old · m_old + (1 − weight_old) · m_new`.
pub fn fp_average<T: Scalar, R: Rng + ?Sized>(
    old: &NeuronMeasure<T>,
    new: &NeuronMeasure<T>,
    weight_old: T,
    mode: AveragingMode,
    rng: &mut R,
) -> Result<NeuronMeasure<T>> {
    if old.input_dim != new.input_dim {
        return Err(Error::Dimension {
            expected: old.input_dim,
            got: new.input_dim,
        });
    }
    if old.activation != new.activation {
        return Err(Error::InvalidParam {
            name: "activation",
            reason: "cannot mix networks with different activations".into(),
        });
    }
    if !(weight_old >= T::zero() && weight_old <= T::one()) {
        return Err(Error::InvalidParam {
            name: "weight_old",
            reason: format!("{weight_old} is outside [0, 1]"),
        });
    }
    if weight_old == T::zero() {
        return Ok(new.clone());
    }
    if weight_old == T::one() {
        return Ok(old.clone());
    }
    let w = weight_old.as_f64();
    match mode {
        AveragingMode::ExactConcat => {
            let (lo, ln) = (old.width(), new.width());
            let total = T::lit((lo + ln) as f64);
            let s_old = weight_old * total / T::lit(lo as f64);
            let s_new = (T::one() - weight_old) * total / T::lit(ln as f64);
            let neurons: Vec<Neuron<T>> = old
                .neurons()
                .map(|mut n| {
                    n.out_weight = n.out_weight * s_old;
                    n
                })
                .chain(new.neurons().map(|mut n| {
                    n.out_weight = n.out_weight * s_new;
                    n
                }))
                .collect();
            NeuronMeasure::from_neurons(old.activation, &neurons)
        }
        AveragingMode::Resample => {
            let neurons: Vec<Neuron<T>> = (0..new.width())
                .map(|_| {
                    if rng.gen::<f64>() < w {
                        old.neuron(rng.gen_range(0..old.width()))
                    } else {
                        new.neuron(rng.gen_range(0..new.width()))
                    }
                })
                .collect();
            NeuronMeasure::from_neurons(old.activation, &neurons)
        }
        AveragingMode::Paired => {
            if old.width() != new.width() {
                return Err(Error::Dimension {
                    expected: old.width(),
                    got: new.width(),
                });
            }
            let width = old.width();
            let mut out = new.clone();
            for l in 0..width {
                if rng.gen::<f64>() < w {
                    out.out_weights[l] = old.out_weights[l];
                    out.biases[l] = old.biases[l];
                    for f in 0..old.input_dim {
                        out.in_weights[f * width + l] = old.in_weights[f * width + l];
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Maximizes the network over an action grid. `input` is a full input
/// vector whose slot `action_slot` is ignored; `encode` maps a rate to its
/// feature value. Ties go to the lowest rate.
pub fn greedy_action<T: Scalar>(
    net: &NeuronMeasure<T>,
    input: &[T],
    action_slot: usize,
    actions: &ActionGrid<T>,
    encode: impl Fn(T) -> T,
) -> Result<(T, T)> {
    net.check_input(input)?;
    let mut z = input.to_vec();
    z[action_slot] = T::zero();
    let pre = net.preactivations(&z);
    let (k, v) = argmax_shifted(net, &pre, action_slot, actions.values().iter().map(|&u| encode(u)));
    Ok((actions.values()[k], v))
}

/// Index and value of the best shift, first index on ties.
#[inline]
pub(crate) fn argmax_shifted<T: Scalar>(
    net: &NeuronMeasure<T>,
    pre: &[T],
    slot: usize,
    shifts: impl Iterator<Item = T>,
) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (k, s) in shifts.enumerate() {
        let v = net.readout_shifted(pre, slot, s);
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}
