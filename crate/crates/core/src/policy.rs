//! Feedback controls of the major bank and of a representative minor bank.

use crate::error::{Error, Result};
use crate::features::{self, Encoder, NetRole};
use crate::market::{ActionGrid, BankState, MarketParams};
use crate::measure::{GridSpec, ProjectedMeasure};
use crate::qnet::{argmax_shifted, axpy, NeuronMeasure};
use crate::scalar::Scalar;

pub trait MajorPolicy<T: Scalar> {
    fn act(&self, t: usize, x0: BankState<T>, rc: T, mu: &ProjectedMeasure<T>) -> T;
}

pub trait MinorPolicy<T: Scalar> {
    fn act(&self, t: usize, x0: BankState<T>, x: BankState<T>, rc: T, mu: &ProjectedMeasure<T>) -> T;

    fn act_many(
        &self,
        t: usize,
        x0: BankState<T>,
        rc: T,
        mu: &ProjectedMeasure<T>,
        states: &[BankState<T>],
    ) -> Vec<T> {
        states.iter().map(|&x| self.act(t, x0, x, rc, mu)).collect()
    }

    /// Rates posted by the minors sitting on each grid node. Nodes without
    /// mass do not move the market; they keep their node rate.
    fn node_actions(
        &self,
        t: usize,
        x0: BankState<T>,
        rc: T,
        mu: &ProjectedMeasure<T>,
        grid: &GridSpec<T>,
    ) -> Vec<T> {
        grid.nodes()
            .zip(mu.weights())
            .map(|(x, &w)| if w > T::zero() { self.act(t, x0, x, rc, mu) } else { x.r })
            .collect()
    }
}

impl<T: Scalar, P: MajorPolicy<T> + ?Sized> MajorPolicy<T> for &P {
    fn act(&self, t: usize, x0: BankState<T>, rc: T, mu: &ProjectedMeasure<T>) -> T {
        (**self).act(t, x0, rc, mu)
    }
}

impl<T: Scalar, P: MinorPolicy<T> + ?Sized> MinorPolicy<T> for &P {
    fn act(&self, t: usize, x0: BankState<T>, x: BankState<T>, rc: T, mu: &ProjectedMeasure<T>) -> T {
        (**self).act(t, x0, x, rc, mu)
    }
    fn act_many(
        &self,
        t: usize,
        x0: BankState<T>,
        rc: T,
        mu: &ProjectedMeasure<T>,
        states: &[BankState<T>],
    ) -> Vec<T> {
        (**self).act_many(t, x0, rc, mu, states)
    }
    fn node_actions(
        &self,
        t: usize,
        x0: BankState<T>,
        rc: T,
        mu: &ProjectedMeasure<T>,
        grid: &GridSpec<T>,
    ) -> Vec<T> {
        (**self).node_actions(t, x0, rc, mu, grid)
    }
}

/// Posts the same rate in every state.
#[derive(Clone, Copy, Debug)]
pub struct ConstantRate<T>(pub T);

impl<T: Scalar> MajorPolicy<T> for ConstantRate<T> {
    fn act(&self, _: usize, _: BankState<T>, _: T, _: &ProjectedMeasure<T>) -> T {
        self.0
    }
}

impl<T: Scalar> MinorPolicy<T> for ConstantRate<T> {
    fn act(&self, _: usize, _: BankState<T>, _: BankState<T>, _: T, _: &ProjectedMeasure<T>) -> T {
        self.0
    }
}

/// Never changes the posted rate.
#[derive(Clone, Copy, Debug, Default)]
pub struct HoldRate;

impl<T: Scalar> MajorPolicy<T> for HoldRate {
    fn act(&self, _: usize, x0: BankState<T>, _: T, _: &ProjectedMeasure<T>) -> T {
        x0.r
    }
}

impl<T: Scalar> MinorPolicy<T> for HoldRate {
    fn act(&self, _: usize, _: BankState<T>, x: BankState<T>, _: T, _: &ProjectedMeasure<T>) -> T {
        x.r
    }
}

/// Major control from a closure `(t, x⁰, r^c, μ) ↦ u⁰`.
pub struct MajorFn<F>(pub F);

impl<T: Scalar, F: Fn(usize, BankState<T>, T, &ProjectedMeasure<T>) -> T> MajorPolicy<T> for MajorFn<F> {
    fn act(&self, t: usize, x0: BankState<T>, rc: T, mu: &ProjectedMeasure<T>) -> T {
        (self.0)(t, x0, rc, mu)
    }
}

/// Minor control from a closure `(t, x⁰, x, r^c, μ) ↦ u`.
pub struct MinorFn<F>(pub F);

impl<T: Scalar, F: Fn(usize, BankState<T>, BankState<T>, T, &ProjectedMeasure<T>) -> T> MinorPolicy<T>
    for MinorFn<F>
{
    fn act(&self, t: usize, x0: BankState<T>, x: BankState<T>, rc: T, mu: &ProjectedMeasure<T>) -> T {
        (self.0)(t, x0, x, rc, mu)
    }
}

fn check_net<T: Scalar>(net: &NeuronMeasure<T>, role: NetRole, measure_len: usize) -> Result<()> {
    let expected = role.input_dim(measure_len);
    if net.input_dim() != expected {
        return Err(Error::Dimension {
            expected,
            got: net.input_dim(),
        });
    }
    Ok(())
}

/// Argmax of the major Q-network over the action grid.
#[derive(Clone, Debug)]
pub struct GreedyMajor<T> {
    net: NeuronMeasure<T>,
    encoder: Encoder<T>,
    actions: ActionGrid<T>,
    shifts: Vec<T>,
}

impl<T: Scalar> GreedyMajor<T> {
    pub fn new(
        net: NeuronMeasure<T>,
        params: &MarketParams<T>,
        actions: ActionGrid<T>,
        measure_len: usize,
    ) -> Result<Self> {
        check_net(&net, NetRole::Major, measure_len)?;
        let encoder = Encoder::new(params);
        let shifts = actions.values().iter().map(|&u| encoder.rate(u)).collect();
        Ok(Self {
            net,
            encoder,
            actions,
            shifts,
        })
    }

    pub fn net(&self) -> &NeuronMeasure<T> {
        &self.net
    }

    /// Best action and its Q-value.
    pub fn best(&self, t: usize, x0: BankState<T>, rc: T, mu: &ProjectedMeasure<T>) -> (T, T) {
        let mut z = vec![T::zero(); self.net.input_dim()];
        self.encoder.major_into(&mut z, t, x0, self.actions.values()[0], rc, mu);
        z[features::major::ACTION] = T::zero();
        let pre = self.net.preactivations(&z);
        let (k, v) = argmax_shifted(&self.net, &pre, features::major::ACTION, self.shifts.iter().copied());
        (self.actions.values()[k], v)
    }
}

impl<T: Scalar> MajorPolicy<T> for GreedyMajor<T> {
    fn act(&self, t: usize, x0: BankState<T>, rc: T, mu: &ProjectedMeasure<T>) -> T {
        self.best(t, x0, rc, mu).0
    }
}

/// Argmax of the minor Q-network over the action grid. Evaluations that
/// share `(t, x⁰, r^c, μ)` reuse one preactivation base.
#[derive(Clone, Debug)]
pub struct GreedyMinor<T> {
    net: NeuronMeasure<T>,
    encoder: Encoder<T>,
    actions: ActionGrid<T>,
    shifts: Vec<T>,
}

impl<T: Scalar> GreedyMinor<T> {
    pub fn new(
        net: NeuronMeasure<T>,
        params: &MarketParams<T>,
        actions: ActionGrid<T>,
        measure_len: usize,
    ) -> Result<Self> {
        check_net(&net, NetRole::Minor, measure_len)?;
        let encoder = Encoder::new(params);
        let shifts = actions.values().iter().map(|&u| encoder.rate(u)).collect();
        Ok(Self {
            net,
            encoder,
            actions,
            shifts,
        })
    }

    pub fn net(&self) -> &NeuronMeasure<T> {
        &self.net
    }

    /// Preactivations with the own-state and action slots zeroed.
    pub fn base(&self, t: usize, x0: BankState<T>, rc: T, mu: &ProjectedMeasure<T>) -> Vec<T> {
        let mut z = vec![T::zero(); self.net.input_dim()];
        self.encoder.minor_into(&mut z, t, x0, x0, x0.r, rc, mu);
        z[features::minor::OWN_P] = T::zero();
        z[features::minor::OWN_R] = T::zero();
        z[features::minor::ACTION] = T::zero();
        self.net.preactivations(&z)
    }

    /// Best action index and value for own state `x` from a shared base.
    pub fn best_from_base(&self, base: &[T], x: BankState<T>, scratch: &mut Vec<T>) -> (usize, T) {
        scratch.clear();
        scratch.extend_from_slice(base);
        axpy(scratch, self.encoder.prop(x.p), self.net.column(features::minor::OWN_P));
        axpy(scratch, self.encoder.rate(x.r), self.net.column(features::minor::OWN_R));
        argmax_shifted(&self.net, scratch, features::minor::ACTION, self.shifts.iter().copied())
    }

    pub fn best(&self, t: usize, x0: BankState<T>, x: BankState<T>, rc: T, mu: &ProjectedMeasure<T>) -> (T, T) {
        let base = self.base(t, x0, rc, mu);
        let (k, v) = self.best_from_base(&base, x, &mut Vec::new());
        (self.actions.values()[k], v)
    }
}

impl<T: Scalar> MinorPolicy<T> for GreedyMinor<T> {
    fn act(&self, t: usize, x0: BankState<T>, x: BankState<T>, rc: T, mu: &ProjectedMeasure<T>) -> T {
        self.best(t, x0, x, rc, mu).0
    }

    fn act_many(
        &self,
        t: usize,
        x0: BankState<T>,
        rc: T,
        mu: &ProjectedMeasure<T>,
        states: &[BankState<T>],
    ) -> Vec<T> {
        let base = self.base(t, x0, rc, mu);
        let mut scratch = Vec::with_capacity(base.len());
        states
            .iter()
            .map(|&x| self.actions.values()[self.best_from_base(&base, x, &mut scratch).0])
            .collect()
    }

    fn node_actions(
        &self,
        t: usize,
        x0: BankState<T>,
        rc: T,
        mu: &ProjectedMeasure<T>,
        grid: &GridSpec<T>,
    ) -> Vec<T> {
        let base = self.base(t, x0, rc, mu);
        let mut scratch = Vec::with_capacity(base.len());
        grid.nodes()
            .zip(mu.weights())
            .map(|(x, &w)| {
                if w > T::zero() {
                    self.actions.values()[self.best_from_base(&base, x, &mut scratch).0]
                } else {
                    x.r
                }
            })
            .collect()
    }
}
