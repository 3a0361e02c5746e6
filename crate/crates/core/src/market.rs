//! Economic primitives of the discrete-time deposit-rate game: client-flow
//! drifts, one-step transitions, running rewards, adjustment costs and the
//! central bank rate chain.
//!
//! Proportions of minor banks are the rescaled proportions `p̄ = N·p`, so a
//! minor population is a probability measure over `(p̄, r)` and the major
//! share plus the first moment of that measure sums to one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{pos, Scalar};

/// Economic constants of the market.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams<T> {
    /// Escape rate of the major bank's clients.
    pub kappa_major: T,
    /// Escape rate of a minor bank's clients.
    pub kappa_minor: T,
    /// Viscosity protecting the major bank's clients.
    pub delta_major: T,
    /// Viscosity protecting a minor bank's clients.
    pub delta_minor: T,
    /// Total deposit volume `W`.
    pub total_deposits: T,
    /// Liquidity premium of the major bank.
    pub l_major: T,
    /// Liquidity premium of a minor bank.
    pub l_minor: T,
    /// Per-step discount factor.
    pub gamma: T,
    /// Linear adjustment cost coefficient.
    pub cost_lin: T,
    /// Fixed cost charged whenever the posted rate changes.
    pub cost_fix: T,
    /// Number of decision steps.
    pub horizon: usize,
    /// Length of one decision period.
    pub dt: T,
    pub rate_min: T,
    pub rate_max: T,
    pub prop_min: T,
    pub prop_max: T,
}

impl<T: Scalar> Default for MarketParams<T> {
    fn default() -> Self {
        Self {
            kappa_major: T::lit(5.0),
            kappa_minor: T::lit(5.0),
            delta_major: T::lit(0.001),
            delta_minor: T::lit(0.001),
            total_deposits: T::one(),
            l_major: T::zero(),
            l_minor: T::lit(0.001),
            gamma: T::lit(0.9),
            cost_lin: T::lit(0.1),
            cost_fix: T::lit(0.001),
            horizon: 5,
            dt: T::one(),
            rate_min: T::lit(0.025),
            rate_max: T::lit(0.035),
            prop_min: T::lit(0.20),
            prop_max: T::lit(0.80),
        }
    }
}

fn check(ok: bool, name: &'static str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParam {
            name,
            reason: reason.to_string(),
        })
    }
}

impl<T: Scalar> MarketParams<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: T| x >= T::zero() && x <= T::one();
        check(self.kappa_major > T::zero(), "kappa_major", "must be > 0")?;
        check(self.kappa_minor > T::zero(), "kappa_minor", "must be > 0")?;
        check(unit(self.delta_major), "delta_major", "must lie in [0, 1]")?;
        check(unit(self.delta_minor), "delta_minor", "must lie in [0, 1]")?;
        check(self.total_deposits > T::zero(), "total_deposits", "must be > 0")?;
        check(unit(self.l_major), "l_major", "must lie in [0, 1]")?;
        check(unit(self.l_minor), "l_minor", "must lie in [0, 1]")?;
        check(
            self.gamma > T::zero() && self.gamma < T::one(),
            "gamma",
            "must lie in (0, 1)",
        )?;
        check(self.cost_lin >= T::zero(), "cost_lin", "must be >= 0")?;
        check(self.cost_fix >= T::zero(), "cost_fix", "must be >= 0")?;
        check(self.horizon >= 1, "horizon", "must be >= 1")?;
        check(self.dt > T::zero(), "dt", "must be > 0")?;
        check(unit(self.rate_min), "rate_min", "must lie in [0, 1]")?;
        check(unit(self.rate_max), "rate_max", "must lie in [0, 1]")?;
        check(self.rate_min < self.rate_max, "rate_max", "must exceed rate_min")?;
        check(self.prop_min >= T::zero(), "prop_min", "must be >= 0")?;
        check(self.prop_min < self.prop_max, "prop_max", "must exceed prop_min")?;
        Ok(())
    }

    /// `κ̄ (r_max − r_min − δ̲)`: the largest flow any single competitor can
    /// induce per unit of counterparty mass.
    pub fn max_flow_rate(&self) -> T {
        let kappa = self.kappa_major.max(self.kappa_minor);
        let delta = self.delta_major.min(self.delta_minor);
        kappa * pos(self.rate_max - self.rate_min - delta)
    }

    pub fn cast<U: Scalar>(&self) -> MarketParams<U> {
        let c = |x: T| U::lit(x.as_f64());
        MarketParams {
            kappa_major: c(self.kappa_major),
            kappa_minor: c(self.kappa_minor),
            delta_major: c(self.delta_major),
            delta_minor: c(self.delta_minor),
            total_deposits: c(self.total_deposits),
            l_major: c(self.l_major),
            l_minor: c(self.l_minor),
            gamma: c(self.gamma),
            cost_lin: c(self.cost_lin),
            cost_fix: c(self.cost_fix),
            horizon: self.horizon,
            dt: c(self.dt),
            rate_min: c(self.rate_min),
            rate_max: c(self.rate_max),
            prop_min: c(self.prop_min),
            prop_max: c(self.prop_max),
        }
    }
}

/// A bank's market proportion and currently posted deposit rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankState<T> {
    pub p: T,
    pub r: T,
}

impl<T> BankState<T> {
    pub fn new(p: T, r: T) -> Self {
        Self { p, r }
    }
}

/// One weighted point `(p̄, r)` of a finite-support minor measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom<T> {
    pub p: T,
    pub r: T,
    pub w: T,
}

impl<T> Atom<T> {
    pub fn new(p: T, r: T, w: T) -> Self {
        Self { p, r, w }
    }
}

pub(crate) fn validate_atoms<T: Scalar>(atoms: &[Atom<T>]) -> Result<()> {
    for a in atoms {
        if !(a.w >= T::zero()) {
            return Err(Error::InvalidMeasure(format!(
                "weight {} at ({}, {}) is negative or not a number",
                a.w, a.p, a.r
            )));
        }
    }
    Ok(())
}

/// Minor population aggregated by posted rate: per rate, the probability
/// mass and the rescaled proportion it holds.
#[derive(Clone, Debug, Default)]
pub(crate) struct RateBook<T> {
    rates: Vec<T>,
    mass: Vec<T>,
    share: Vec<T>,
}

impl<T: Scalar> RateBook<T> {
    pub(crate) fn from_atoms(atoms: &[Atom<T>]) -> Self {
        let mut book = Self::default();
        book.fill(atoms.iter().map(|a| (a.p, a.r, a.w)));
        book
    }

    pub(crate) fn fill(&mut self, atoms: impl Iterator<Item = (T, T, T)>) {
        self.rates.clear();
        self.mass.clear();
        self.share.clear();
        for (p, r, w) in atoms {
            if w == T::zero() {
                continue;
            }
            match self.rates.iter().position(|&x| x == r) {
                Some(k) => {
                    self.mass[k] = self.mass[k] + w;
                    self.share[k] = self.share[k] + w * p;
                }
                None => {
                    self.rates.push(r);
                    self.mass.push(w);
                    self.share.push(w * p);
                }
            }
        }
    }

    /// Drift of the major share given its new rate `u0`.
    pub(crate) fn major_drift(&self, p0: T, u0: T, params: &MarketParams<T>) -> T {
        let mut gain = T::zero();
        let mut lost = T::zero();
        for k in 0..self.rates.len() {
            let r = self.rates[k];
            gain = gain + pos(u0 - r - params.delta_minor) * self.share[k];
            lost = lost + pos(r - u0 - params.delta_major) * self.mass[k];
        }
        params.kappa_minor * gain - params.kappa_major * lost * p0
    }

    /// Drift of a minor bank holding `p` that posts `u` against a major bank
    /// `(p0, u0)` and this population.
    pub(crate) fn minor_drift(&self, p0: T, u0: T, p: T, u: T, params: &MarketParams<T>) -> T {
        let from_major = params.kappa_major * pos(u - u0 - params.delta_major) * p0;
        let to_major = params.kappa_minor * pos(u0 - u - params.delta_minor) * p;
        let mut gain = T::zero();
        let mut lost = T::zero();
        for k in 0..self.rates.len() {
            let r = self.rates[k];
            gain = gain + pos(u - r - params.delta_minor) * self.share[k];
            lost = lost + pos(r - u - params.delta_minor) * self.mass[k];
        }
        from_major + params.kappa_minor * (gain - lost * p) - to_major
    }
}

/// Rate of change of the major share.
///
/// `major` carries the major proportion and its newly posted rate; the atoms
/// carry each minor's proportion and the rate it posts over the same step.
pub fn drift_major<T: Scalar>(
    major: BankState<T>,
    minors: &[Atom<T>],
    params: &MarketParams<T>,
) -> Result<T> {
    validate_atoms(minors)?;
    Ok(RateBook::from_atoms(minors).major_drift(major.p, major.r, params))
}

/// Rate of change of a representative minor bank's rescaled proportion.
pub fn drift_minor<T: Scalar>(
    major: BankState<T>,
    own_new_rate: T,
    own_p: T,
    minors: &[Atom<T>],
    params: &MarketParams<T>,
) -> Result<T> {
    validate_atoms(minors)?;
    Ok(RateBook::from_atoms(minors).minor_drift(major.p, major.r, own_p, own_new_rate, params))
}

pub(crate) fn euler_step<T: Scalar>(p: T, drift: T, dt: T) -> T {
    let next = p + drift * dt;
    if next < T::zero() || next > T::one() {
        log::warn!("proportion {} left [0, 1] and was clamped", next);
        next.max(T::zero()).min(T::one())
    } else {
        next
    }
}

/// `K⁰`: the major bank after one step.
pub fn transition_major<T: Scalar>(
    x0: BankState<T>,
    u0: T,
    minors: &[Atom<T>],
    params: &MarketParams<T>,
) -> Result<BankState<T>> {
    let b = drift_major(BankState::new(x0.p, u0), minors, params)?;
    Ok(BankState::new(euler_step(x0.p, b, params.dt), u0))
}

/// `K`: a representative minor bank after one step. Only the proportion
/// moves by the drift; the rate becomes the chosen action.
pub fn transition_minor<T: Scalar>(
    x0: BankState<T>,
    u0: T,
    x: BankState<T>,
    u: T,
    minors: &[Atom<T>],
    params: &MarketParams<T>,
) -> Result<BankState<T>> {
    let b = drift_minor(BankState::new(x0.p, u0), u, x.p, minors, params)?;
    Ok(BankState::new(euler_step(x.p, b, params.dt), u))
}

/// Cost of moving the posted rate by `delta_r`.
#[inline]
pub fn adjustment_cost<T: Scalar>(delta_r: T, params: &MarketParams<T>) -> T {
    if delta_r == T::zero() {
        T::zero()
    } else {
        params.cost_lin * delta_r.abs() + params.cost_fix
    }
}

/// Running P&L of the major bank: deposit margin on the pre-transition share
/// at the newly posted rate, minus the adjustment cost.
#[inline]
pub fn reward_major<T: Scalar>(x0: BankState<T>, u0: T, rc: T, params: &MarketParams<T>) -> T {
    params.total_deposits * x0.p * (params.l_major + rc - u0) - adjustment_cost(u0 - x0.r, params)
}

#[inline]
pub fn reward_minor<T: Scalar>(x: BankState<T>, u: T, rc: T, params: &MarketParams<T>) -> T {
    params.total_deposits * x.p * (params.l_minor + rc - u) - adjustment_cost(u - x.r, params)
}

/// Evenly spaced values with exact endpoints. Grids built with the same
/// endpoints share their common nodes bit for bit.
pub fn linspace<T: Scalar>(start: T, end: T, n: usize) -> Vec<T> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|k| {
                if k == 0 {
                    start
                } else if k == n - 1 {
                    end
                } else {
                    start + (end - start) * T::lit(k as f64 / (n - 1) as f64)
                }
            })
            .collect(),
    }
}

/// Finite set of admissible posted rates, ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionGrid<T> {
    values: Vec<T>,
}

impl<T: Scalar> ActionGrid<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParam {
                name: "action_grid",
                reason: "must not be empty".into(),
            });
        }
        if values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParam {
                name: "action_grid",
                reason: "must be strictly increasing".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn uniform(min: T, max: T, n: usize) -> Result<Self> {
        Self::new(linspace(min, max, n))
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn contains(&self, u: T) -> bool {
        self.values.iter().any(|&v| v == u)
    }

    pub fn cast<U: Scalar>(&self) -> ActionGrid<U> {
        ActionGrid {
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Finite-state Markov chain of the central bank rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentralBankChain<T> {
    rates: Vec<T>,
    transition: Vec<Vec<T>>,
}

impl<T: Scalar> CentralBankChain<T> {
    /// Euler step of a jump chain with intensity `lambda`: stay with
    /// probability `1 − λΔt`, otherwise jump uniformly to another rate.
    pub fn jump_chain(rates: Vec<T>, lambda: T, dt: T) -> Result<Self> {
        let n = rates.len();
        let jump = lambda * dt;
        check(
            jump >= T::zero() && jump <= T::one(),
            "lambda",
            "lambda * dt must lie in [0, 1]",
        )?;
        let transition = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if n == 1 {
                            T::one()
                        } else if i == j {
                            T::one() - jump
                        } else {
                            jump / T::lit((n - 1) as f64)
                        }
                    })
                    .collect()
            })
            .collect();
        Self::from_matrix(rates, transition)
    }

    pub fn from_matrix(rates: Vec<T>, transition: Vec<Vec<T>>) -> Result<Self> {
        check(!rates.is_empty(), "rates", "must not be empty")?;
        check(
            transition.len() == rates.len() && transition.iter().all(|r| r.len() == rates.len()),
            "transition",
            "must be square with one row per rate",
        )?;
        for row in &transition {
            check(
                row.iter().all(|&x| x >= T::zero()),
                "transition",
                "entries must be nonnegative",
            )?;
            let total: T = row.iter().copied().sum();
            check(
                (total - T::one()).abs() <= T::mass_tolerance(),
                "transition",
                "rows must sum to 1",
            )?;
        }
        Ok(Self { rates, transition })
    }

    pub fn rates(&self) -> &[T] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn index_of(&self, rc: T) -> Result<usize> {
        self.rates
            .iter()
            .position(|&r| (r - rc).abs() <= T::lit(1e-12))
            .ok_or(Error::UnknownRate(rc.as_f64()))
    }

    pub fn row(&self, rc: T) -> Result<&[T]> {
        Ok(&self.transition[self.index_of(rc)?])
    }

    pub fn row_at(&self, i: usize) -> &[T] {
        &self.transition[i]
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let row = &self.transition[i];
        for (j, p) in row.iter().enumerate() {
            acc += p.as_f64();
            if u < acc {
                return j;
            }
        }
        // rounding left a sliver above the last cumulative value
        row.iter().rposition(|p| *p > T::zero()).unwrap_or(i)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rc: T, rng: &mut R) -> Result<T> {
        let i = self.index_of(rc)?;
        Ok(self.rates[self.sample_index(i, rng)])
    }

    pub fn cast<U: Scalar>(&self) -> CentralBankChain<U> {
        let c = |x: &T| U::lit(x.as_f64());
        CentralBankChain {
            rates: self.rates.iter().map(c).collect(),
            transition: self
                .transition
                .iter()
                .map(|row| row.iter().map(c).collect())
                .collect(),
        }
    }
}

impl<T: Scalar> Default for CentralBankChain<T> {
    fn default() -> Self {
        Self::jump_chain(
            vec![T::lit(0.025), T::lit(0.030), T::lit(0.035)],
            T::lit(0.2),
            T::one(),
        )
        .expect("default chain is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> MarketParams<f64> {
        MarketParams::default()
    }

    #[test]
    fn drift_major_examples() {
        let p = params();
        let at = |r| [Atom::new(1.0, r, 1.0)];
        let d = drift_major(BankState::new(0.5, 0.03), &at(0.03), &p).unwrap();
        assert_eq!(d, 0.0);
        let d = drift_major(BankState::new(0.5, 0.03), &at(0.028), &p).unwrap();
        assert_abs_diff_eq!(d, 0.005, epsilon = 1e-15);
        let d = drift_major(BankState::new(0.5, 0.025), &at(0.030), &p).unwrap();
        assert_abs_diff_eq!(d, -0.010, epsilon = 1e-15);
    }

    #[test]
    fn drift_minor_examples() {
        let p = params();
        let d = drift_minor(
            BankState::new(0.5, 0.03),
            0.03,
            0.5,
            &[Atom::new(0.5, 0.03, 1.0)],
            &p,
        )
        .unwrap();
        assert_eq!(d, 0.0);
        let d = drift_minor(
            BankState::new(0.5, 0.030),
            0.032,
            0.5,
            &[Atom::new(0.5, 0.030, 1.0)],
            &p,
        )
        .unwrap();
        assert_abs_diff_eq!(d, 0.005, epsilon = 1e-15);
        let d = drift_minor(
            BankState::new(0.5, 0.030),
            0.025,
            1.0,
            &[Atom::new(1.0, 0.025, 1.0)],
            &p,
        )
        .unwrap();
        assert_abs_diff_eq!(d, -0.020, epsilon = 1e-15);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let err = drift_major(
            BankState::new(0.5, 0.03),
            &[Atom::new(1.0, 0.03, -0.1)],
            &params(),
        );
        assert!(matches!(err, Err(Error::InvalidMeasure(_))));
        let err = drift_minor(
            BankState::new(0.5, 0.03),
            0.03,
            0.5,
            &[Atom::new(1.0, 0.03, f64::NAN)],
            &params(),
        );
        assert!(matches!(err, Err(Error::InvalidMeasure(_))));
    }

    #[test]
    fn transitions() {
        let p = params();
        let flat = [Atom::new(1.0, 0.03, 1.0)];
        let x = transition_major(BankState::new(0.5, 0.03), 0.03, &flat, &p).unwrap();
        assert_eq!(x, BankState::new(0.5, 0.03));
        let x = transition_major(BankState::new(0.5, 0.027), 0.03, &[Atom::new(1.0, 0.028, 1.0)], &p)
            .unwrap();
        assert_abs_diff_eq!(x.p, 0.505, epsilon = 1e-15);
        assert_eq!(x.r, 0.03);

        let y = transition_minor(
            BankState::new(0.5, 0.03),
            0.03,
            BankState::new(0.5, 0.03),
            0.03,
            &[Atom::new(0.5, 0.03, 1.0)],
            &p,
        )
        .unwrap();
        assert_eq!(y, BankState::new(0.5, 0.03));
        let y = transition_minor(
            BankState::new(0.5, 0.03),
            0.030,
            BankState::new(0.5, 0.03),
            0.032,
            &[Atom::new(0.5, 0.030, 1.0)],
            &p,
        )
        .unwrap();
        assert_abs_diff_eq!(y.p, 0.505, epsilon = 1e-15);
        assert_eq!(y.r, 0.032);
    }

    #[test]
    fn clamp_keeps_proportion_in_unit_interval() {
        assert_eq!(euler_step(0.99, 0.05, 1.0), 1.0);
        assert_eq!(euler_step(0.01, -0.05, 1.0), 0.0);
    }

    #[test]
    fn reward_examples() {
        let p = params();
        assert_eq!(reward_major(BankState::new(0.5, 0.03), 0.03, 0.03, &p), 0.0);
        assert_abs_diff_eq!(
            reward_major(BankState::new(0.5, 0.03), 0.025, 0.03, &p),
            0.001,
            epsilon = 1e-15
        );
        assert_eq!(reward_major(BankState::new(0.0, 0.03), 0.03, 0.03, &p), 0.0);

        assert_abs_diff_eq!(
            reward_minor(BankState::new(0.5, 0.03), 0.03, 0.03, &p),
            0.0005,
            epsilon = 1e-15
        );
        assert_eq!(reward_minor(BankState::new(0.0, 0.03), 0.03, 0.03, &p), 0.0);
        assert_abs_diff_eq!(
            reward_minor(BankState::new(0.5, 0.03), 0.035, 0.03, &p),
            -0.0035,
            epsilon = 1e-15
        );
    }

    #[test]
    fn cost_examples() {
        let p = params();
        assert_eq!(adjustment_cost(0.0, &p), 0.0);
        assert_abs_diff_eq!(adjustment_cost(0.005, &p), 0.0015, epsilon = 1e-15);
        assert_abs_diff_eq!(adjustment_cost(-0.01, &p), 0.002, epsilon = 1e-15);
    }

    #[test]
    fn central_bank_chain() {
        let chain = CentralBankChain::<f64>::default();
        let row = chain.row(0.03).unwrap();
        assert_abs_diff_eq!(row[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(row[1], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(row[2], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(chain.row(0.025).unwrap()[2], 0.1, epsilon = 1e-15);
        for i in 0..chain.len() {
            let s: f64 = chain.row_at(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(matches!(chain.row(0.031), Err(Error::UnknownRate(_))));
        assert!(CentralBankChain::from_matrix(vec![0.1, 0.2], vec![vec![0.5, 0.6], vec![0.5, 0.5]])
            .is_err());
    }

    #[test]
    fn chain_sampling_matches_row() {
        let chain = CentralBankChain::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[chain.index_of(chain.sample(0.03, &mut rng).unwrap()).unwrap()] += 1;
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        // 5 standard errors of a Bernoulli(0.1) frequency
        let tol = 5.0 * (0.1f64 * 0.9 / n as f64).sqrt();
        assert!((freq[0] - 0.1).abs() < tol, "{freq:?}");
        assert!((freq[2] - 0.1).abs() < tol, "{freq:?}");
    }

    #[test]
    fn params_validation() {
        let mut p = params();
        p.validate().unwrap();
        p.gamma = 1.0;
        assert!(p.validate().is_err());
        let mut p = params();
        p.rate_max = 0.02;
        assert!(p.validate().is_err());
        let mut p = params();
        p.kappa_minor = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn max_flow_rate_is_four_and_a_half_percent() {
        assert_abs_diff_eq!(params().max_flow_rate(), 0.045, epsilon = 1e-15);
    }

    #[test]
    fn shared_nodes_are_bit_identical() {
        let fine = linspace(0.025, 0.035, 11);
        let coarse = linspace(0.025, 0.035, 6);
        for (j, r) in coarse.iter().enumerate() {
            assert_eq!(fine[2 * j], *r);
        }
    }

    fn population() -> impl Strategy<Value = Vec<Atom<f64>>> {
        prop::collection::vec((0.0..1.0f64, 0usize..11, 0.001..1.0f64), 1..12).prop_map(|v| {
            let rates = linspace(0.025, 0.035, 11);
            let total: f64 = v.iter().map(|a| a.2).sum();
            v.into_iter()
                .map(|(p, k, w)| Atom::new(p, rates[k], w / total))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn drifts_conserve_total_mass(pop in population(), p0 in 0.0..1.0f64, u0 in 0.025..0.035f64) {
            let p = params();
            let b0 = drift_major(BankState::new(p0, u0), &pop, &p).unwrap();
            let minors: f64 = pop
                .iter()
                .map(|a| a.w * drift_minor(BankState::new(p0, u0), a.r, a.p, &pop, &p).unwrap())
                .sum();
            prop_assert!((b0 + minors).abs() < 1e-15);
        }

        #[test]
        fn drifts_are_bounded(pop in population(), u0 in 0.025..0.035f64, u in 0.025..0.035f64, own in 0.2..0.8f64) {
            let p = params();
            // major share consistent with the population
            let mass: f64 = pop.iter().map(|a| a.w * a.p).sum();
            let p0 = (1.0 - mass).max(0.0);
            let bound = p.max_flow_rate();
            let b0 = drift_major(BankState::new(p0, u0), &pop, &p).unwrap();
            prop_assert!(b0.abs() <= bound * p0.max(mass) + 1e-15);
            let b = drift_minor(BankState::new(p0, u0), u, own, &pop, &p).unwrap();
            // gains are capped by the total counterparty mass, losses by twice the own share
            prop_assert!(b <= bound * (p0 + mass) + 1e-15);
            prop_assert!(-b <= 2.0 * bound * own + 1e-15);
        }

        #[test]
        fn minor_drift_nondecreasing_in_own_rate(pop in population(), p0 in 0.0..1.0f64, u0 in 0.025..0.035f64,
                                                  own in 0.0..1.0f64, a in 0.025..0.035f64, b in 0.025..0.035f64) {
            let p = params();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let d_lo = drift_minor(BankState::new(p0, u0), lo, own, &pop, &p).unwrap();
            let d_hi = drift_minor(BankState::new(p0, u0), hi, own, &pop, &p).unwrap();
            prop_assert!(d_hi >= d_lo - 1e-15);
        }

        #[test]
        fn rates_inside_viscosity_band_give_zero_drift(p0 in 0.0..1.0f64, base in 0.025..0.034f64,
                                                       offs in prop::collection::vec((0.0..0.001f64, 0.0..1.0f64, 0.01..1.0f64), 1..8)) {
            let p = params();
            let total: f64 = offs.iter().map(|o| o.2).sum();
            let pop: Vec<_> = offs.iter().map(|o| Atom::new(o.1, base + o.0, o.2 / total)).collect();
            prop_assert_eq!(drift_major(BankState::new(p0, base + 0.0005), &pop, &p).unwrap(), 0.0);
            for a in &pop {
                prop_assert_eq!(drift_minor(BankState::new(p0, base + 0.0005), a.r, a.p, &pop, &p).unwrap(), 0.0);
            }
        }

        #[test]
        fn reward_without_rate_change_has_no_cost(p in 0.0..1.0f64, r in 0.025..0.035f64, rc in 0.025..0.035f64) {
            let params = params();
            let x = BankState::new(p, r);
            prop_assert_eq!(reward_minor(x, r, rc, &params), p * (params.l_minor + rc - r));
            prop_assert_eq!(reward_major(x, r, rc, &params), p * (params.l_major + rc - r));
        }
    }
}
