//! The full problem instance: market constants, measure grid, central bank
//! chain, action grid and initial condition.

use crate::error::{Error, Result};
use crate::market::{ActionGrid, BankState, CentralBankChain, MarketParams};
use crate::measure::{aggregate_minor_mass, GridSpec, ProjectedMeasure};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct InitialState<T> {
    pub major: BankState<T>,
    pub measure: ProjectedMeasure<T>,
    pub cb_rate: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Game<T> {
    pub params: MarketParams<T>,
    pub grid: GridSpec<T>,
    pub chain: CentralBankChain<T>,
    pub actions: ActionGrid<T>,
    pub initial: InitialState<T>,
}

impl<T: Scalar> Default for Game<T> {
    /// Major bank at `(0.5, 3%)`, minors uniform on `[0.4, 0.6] × [2.5%, 3.5%]`,
    /// central bank at 3%.
    fn default() -> Self {
        let params = MarketParams::default();
        let grid = GridSpec::default();
        let measure = ProjectedMeasure::uniform_box(
            &grid,
            (T::lit(0.4), T::lit(0.6)),
            (params.rate_min, params.rate_max),
        )
        .expect("default box lies inside the default grid");
        let actions = ActionGrid::uniform(params.rate_min, params.rate_max, 11)
            .expect("default action grid is valid");
        Self {
            initial: InitialState {
                major: BankState::new(T::lit(0.5), T::lit(0.03)),
                measure,
                cb_rate: T::lit(0.03),
            },
            params,
            grid,
            chain: CentralBankChain::default(),
            actions,
        }
    }
}

impl<T: Scalar> Game<T> {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.grid.validate_against(&self.params)?;
        let in_rates = |r: T| r >= self.params.rate_min && r <= self.params.rate_max;
        if !self.actions.values().iter().all(|&u| in_rates(u)) {
            return Err(Error::InvalidParam {
                name: "actions",
                reason: "every action must lie in [rate_min, rate_max]".into(),
            });
        }
        if self.initial.measure.len() != self.grid.len() {
            return Err(Error::Dimension {
                expected: self.grid.len(),
                got: self.initial.measure.len(),
            });
        }
        self.chain.index_of(self.initial.cb_rate)?;
        let x0 = self.initial.major;
        if !(x0.p >= T::zero() && x0.p <= T::one()) || !in_rates(x0.r) {
            return Err(Error::StateOutOfBounds(format!(
                "initial major state ({}, {})",
                x0.p, x0.r
            )));
        }
        let total = x0.p + aggregate_minor_mass(&self.initial.measure, &self.grid);
        if (total - T::one()).abs() > T::lit(1e3) * T::mass_tolerance() {
            log::warn!("initial proportions sum to {total}, not 1");
        }
        Ok(())
    }

    /// Discount factor raised to `t`.
    pub fn discount(&self, t: usize) -> T {
        self.params.gamma.powi(t as i32)
    }

    pub fn cast<U: Scalar>(&self) -> Game<U> {
        Game {
            params: self.params.cast(),
            grid: self.grid.cast(),
            chain: self.chain.cast(),
            actions: self.actions.cast(),
            initial: InitialState {
                major: BankState::new(U::lit(self.initial.major.p.as_f64()), U::lit(self.initial.major.r.as_f64())),
                measure: self.initial.measure.cast(),
                cb_rate: U::lit(self.initial.cb_rate.as_f64()),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_game_is_consistent() {
        let g = Game::<f64>::default();
        g.validate().unwrap();
        let m = aggregate_minor_mass(&g.initial.measure, &g.grid);
        assert!((g.initial.major.p + m - 1.0).abs() < 1e-12);
        g.cast::<f32>().validate().unwrap();
    }

    #[test]
    fn action_outside_bounds_is_rejected() {
        let mut g = Game::<f64>::default();
        g.actions = ActionGrid::new(vec![0.02, 0.03]).unwrap();
        assert!(g.validate().is_err());
    }
}
