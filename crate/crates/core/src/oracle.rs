//! Brute-force reference solvers.
//!
//! The flow is recomputed from the market primitives at every call and no
//! value is cached. Costs grow exponentially with the horizon; use only on
//! small instances.

use crate::error::Result;
use crate::game::Game;
use crate::market::{linspace, reward_major, reward_minor, BankState};
use crate::measure::{DecidedMarket, ProjectedMeasure, SupportMode};
use crate::policy::{MajorPolicy, MinorPolicy};
use crate::scalar::Scalar;

#[derive(Clone)]
struct Env<T> {
    t: usize,
    rc_index: usize,
    major: BankState<T>,
    mu: ProjectedMeasure<T>,
}

struct Flow<'a, T> {
    game: &'a Game<T>,
    major: &'a dyn MajorPolicy<T>,
    minor: &'a dyn MinorPolicy<T>,
}

impl<T: Scalar> Flow<'_, T> {
    fn root(&self) -> Result<Env<T>> {
        Ok(Env {
            t: 0,
            rc_index: self.game.chain.index_of(self.game.initial.cb_rate)?,
            major: self.game.initial.major,
            mu: self.game.initial.measure.clone(),
        })
    }

    fn rc(&self, e: &Env<T>) -> T {
        self.game.chain.rates()[e.rc_index]
    }

    fn market(&self, e: &Env<T>, u0: T) -> Result<DecidedMarket<T>> {
        let rc = self.rc(e);
        let nodes: Vec<T> = (0..self.game.grid.len())
            .map(|k| {
                if e.mu.weights()[k] > T::zero() {
                    self.minor.act(e.t, e.major, self.game.grid.node(k), rc, &e.mu)
                } else {
                    self.game.grid.node(k).r
                }
            })
            .collect();
        DecidedMarket::new(e.major.p, u0, &e.mu, &nodes, &self.game.grid)
    }

    /// Successor environments with their transition probabilities.
    fn children(&self, e: &Env<T>, market: &DecidedMarket<T>, support: SupportMode) -> Result<Vec<(Env<T>, T)>> {
        let (mu, _) = market.next_measure(&self.game.grid, &self.game.params, support)?;
        let major = market.next_major(&self.game.params);
        Ok(self
            .game
            .chain
            .row_at(e.rc_index)
            .iter()
            .enumerate()
            .map(|(j, &pj)| {
                (
                    Env {
                        t: e.t + 1,
                        rc_index: j,
                        major,
                        mu: mu.clone(),
                    },
                    pj,
                )
            })
            .collect())
    }
}

/// Grid points bracketing `x` with their interpolation weights, clamped to
/// the grid's range.
fn bracket<T: Scalar>(grid: &[T], x: T) -> Vec<(usize, T)> {
    let last = grid.len() - 1;
    if x <= grid[0] {
        return vec![(0, T::one())];
    }
    if x >= grid[last] {
        return vec![(last, T::one())];
    }
    let mut i = 0;
    while grid[i + 1] <= x {
        i += 1;
    }
    let frac = (x - grid[i]) / (grid[i + 1] - grid[i]);
    if frac == T::zero() {
        vec![(i, T::one())]
    } else {
        vec![(i, T::one() - frac), (i + 1, frac)]
    }
}

/// Discretized problem of a single minor bank: own proportion on a uniform
/// grid with linear interpolation, own rate exact.
pub struct MinorOracle<'a, T> {
    flow: Flow<'a, T>,
    p_grid: Vec<T>,
    deviation: Option<&'a dyn MinorPolicy<T>>,
}

impl<'a, T: Scalar> MinorOracle<'a, T> {
    /// Best response on a `p_points` grid to the flow generated by
    /// `major` and `minor`.
    pub fn best_response(
        game: &'a Game<T>,
        major: &'a dyn MajorPolicy<T>,
        minor: &'a dyn MinorPolicy<T>,
        p_points: usize,
    ) -> Self {
        Self {
            flow: Flow { game, major, minor },
            p_grid: linspace(game.params.prop_min, game.params.prop_max, p_points),
            deviation: None,
        }
    }

    /// Value of following `minor` itself on the same grid.
    pub fn on_policy(
        game: &'a Game<T>,
        major: &'a dyn MajorPolicy<T>,
        minor: &'a dyn MinorPolicy<T>,
        p_points: usize,
    ) -> Self {
        Self {
            deviation: Some(minor),
            ..Self::best_response(game, major, minor, p_points)
        }
    }

    fn grid_value(&self, e: &Env<T>, ip: usize, r: T) -> Result<T> {
        let game = self.flow.game;
        let rc = self.flow.rc(e);
        let x = BankState::new(self.p_grid[ip], r);
        let u0 = self.flow.major.act(e.t, e.major, rc, &e.mu);
        let market = self.flow.market(e, u0)?;
        let candidates = match self.deviation {
            Some(pi) => vec![pi.act(e.t, e.major, x, rc, &e.mu)],
            None => game.actions.values().to_vec(),
        };
        let last = e.t + 1 >= game.params.horizon;
        let mut best = T::neg_infinity();
        for u in candidates {
            let mut v = game.discount(e.t) * reward_minor(x, u, rc, &game.params);
            if !last {
                let next_p = market.next_minor(x.p, u, &game.params).p;
                for (child, pj) in self.flow.children(e, &market, SupportMode::Strict)? {
                    for (i, w) in bracket(&self.p_grid, next_p) {
                        v = v + pj * w * self.grid_value(&child, i, u)?;
                    }
                }
            }
            if v > best {
                best = v;
            }
        }
        Ok(best)
    }

    /// Interpolated value at the start of the game from state `x`.
    pub fn value(&self, x: BankState<T>) -> Result<T> {
        let root = self.flow.root()?;
        let mut v = T::zero();
        for (i, w) in bracket(&self.p_grid, x.p) {
            v = v + w * self.grid_value(&root, i, x.r)?;
        }
        Ok(v)
    }

    /// Mass-weighted start value over representative states.
    pub fn weighted_value(&self, reps: &[BankState<T>], weights: &[T]) -> Result<T> {
        reps.iter()
            .zip(weights)
            .try_fold(T::zero(), |acc, (&x, &w)| Ok(acc + w * self.value(x)?))
    }
}

/// Best response of a minor bank that tracks its own proportion exactly,
/// by enumerating every action at every history.
pub fn exact_minor_best_response<T: Scalar>(
    game: &Game<T>,
    major: &dyn MajorPolicy<T>,
    minor: &dyn MinorPolicy<T>,
    x: BankState<T>,
) -> Result<T> {
    fn go<T: Scalar>(flow: &Flow<'_, T>, e: &Env<T>, x: BankState<T>) -> Result<T> {
        let game = flow.game;
        let rc = flow.rc(e);
        let u0 = flow.major.act(e.t, e.major, rc, &e.mu);
        let market = flow.market(e, u0)?;
        let mut best = T::neg_infinity();
        for &u in game.actions.values() {
            let mut v = game.discount(e.t) * reward_minor(x, u, rc, &game.params);
            if e.t + 1 < game.params.horizon {
                let next = market.next_minor(x.p, u, &game.params);
                for (child, pj) in flow.children(e, &market, SupportMode::Strict)? {
                    v = v + pj * go(flow, &child, next)?;
                }
            }
            if v > best {
                best = v;
            }
        }
        Ok(best)
    }
    let flow = Flow { game, major, minor };
    go(&flow, &flow.root()?, x)
}

/// Truncated best response of the major bank over `horizon` steps against
/// the population following `minor`.
pub fn major_best_response<T: Scalar>(game: &Game<T>, minor: &dyn MinorPolicy<T>, horizon: usize) -> Result<T> {
    fn go<T: Scalar>(flow: &Flow<'_, T>, e: &Env<T>, horizon: usize) -> Result<T> {
        let game = flow.game;
        let rc = flow.rc(e);
        let mut best = T::neg_infinity();
        for &u0 in game.actions.values() {
            let mut v = game.discount(e.t) * reward_major(e.major, u0, rc, &game.params);
            if e.t + 1 < horizon {
                let market = flow.market(e, u0)?;
                for (child, pj) in flow.children(e, &market, SupportMode::Clamp)? {
                    v = v + pj * go(flow, &child, horizon)?;
                }
            }
            if v > best {
                best = v;
            }
        }
        Ok(best)
    }
    let unused = crate::policy::HoldRate;
    let flow = Flow {
        game,
        major: &unused,
        minor,
    };
    go(&flow, &flow.root()?, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{
        best_response_minor, exact_minor_value, initial_representatives, major_tree_value_bfs, FlowTree,
        MajorChoice,
    };
    use crate::market::ActionGrid;
    use crate::policy::{ConstantRate, HoldRate, MajorFn, MinorFn};
    use crate::measure::ProjectedMeasure;

    fn reduced() -> Game<f64> {
        let mut g = Game::<f64>::default();
        g.params.horizon = 3;
        g.actions = ActionGrid::uniform(0.025, 0.035, 5).unwrap();
        g
    }

    #[test]
    fn bracket_weights_sum_to_one() {
        let grid = [0.2, 0.5, 0.8];
        for x in [0.1, 0.2, 0.3, 0.5, 0.79, 0.9] {
            let s: f64 = bracket(&grid, x).iter().map(|b| b.1).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        let b = bracket(&grid, 0.35);
        assert_eq!((b[0].0, b[1].0), (0, 1));
        assert!((b[0].1 - 0.5).abs() < 1e-12);
        assert_eq!(bracket(&grid, 0.5), vec![(1, 1.0)]);
    }

    #[test]
    fn tables_match_enumeration_on_reduced_instance() {
        let game = reduced();
        let a = game.actions.values().to_vec();
        let (reps, w) = initial_representatives(&game);
        let (lo, mid) = (a[0], a[2]);
        let major = MajorFn(move |t: usize, _: BankState<f64>, _: f64, _: &ProjectedMeasure<f64>| {
            if t == 0 {
                mid
            } else {
                lo
            }
        });
        let (down, up) = (a[1], a[3]);
        let minor = MinorFn(move |_: usize, _: BankState<f64>, x: BankState<f64>, _: f64, _: &ProjectedMeasure<f64>| {
            if x.p > 0.5 {
                down
            } else {
                up
            }
        });
        for p_points in [2, 4, 7] {
            let gap = best_response_minor(&game, &major, &minor, &reps, &w, p_points).unwrap();
            let br = MinorOracle::best_response(&game, &major, &minor, p_points).weighted_value(&reps, &w).unwrap();
            let on = MinorOracle::on_policy(&game, &major, &minor, p_points).weighted_value(&reps, &w).unwrap();
            assert!((gap.best_response - br).abs() < 1e-10);
            assert!((gap.on_policy - on).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_best_response_dominates_the_policy() {
        let game = reduced();
        let x = BankState::new(0.44, 0.03);
        let br = exact_minor_best_response(&game, &HoldRate, &HoldRate, x).unwrap();
        let tree = FlowTree::build(&game, &HoldRate, &HoldRate).unwrap();
        let on = exact_minor_value(&game, &tree, &HoldRate, &[x], &[1.0]);
        assert!(br >= on - 1e-12);
        let cheap = exact_minor_best_response(&game, &HoldRate, &HoldRate, BankState::new(0.44, 0.025)).unwrap();
        assert!(cheap >= br);
    }

    #[test]
    fn major_enumeration_matches_tree_search() {
        let game = reduced();
        for h in 1..=3 {
            let bfs = major_tree_value_bfs(&game, &ConstantRate(0.03), h, MajorChoice::Best, 1 << 20).unwrap();
            let brute = major_best_response(&game, &ConstantRate(0.03), h).unwrap();
            assert!((bfs - brute).abs() < 1e-10, "h={h}: {bfs} vs {brute}");
        }
    }
}
