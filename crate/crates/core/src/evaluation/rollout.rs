use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Game;
use crate::market::{reward_major, reward_minor, BankState};
use crate::measure::{aggregate_minor_mass, DecidedMarket, ProjectedMeasure, SupportMode};
use crate::policy::{MajorPolicy, MinorPolicy};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutMode {
    /// Draw central bank paths from the chain.
    #[default]
    Sampled,
    /// Enumerate every central bank path with its probability.
    FullTree,
}

/// A tracked minor bank at one step: state before deciding, posted rate and
/// reward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinorRecord<T> {
    pub p: T,
    pub r: T,
    pub u: T,
    pub reward: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step<T> {
    pub t: usize,
    pub cb_rate: T,
    pub major_p: T,
    pub major_r: T,
    pub major_u: T,
    pub measure: Vec<T>,
    pub reward_major: T,
    pub minors: Vec<MinorRecord<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    /// Probability of the central bank path (sampled paths carry `1/n`).
    pub probability: T,
    pub steps: Vec<Step<T>>,
}

impl<T: Scalar> Trajectory<T> {
    /// `Σ γᵗ R⁰ₜ`.
    pub fn value_major(&self, gamma: T) -> T {
        self.steps
            .iter()
            .fold((T::zero(), T::one()), |(acc, g), s| (acc + g * s.reward_major, g * gamma))
            .0
    }

    /// `Σ γᵗ Rₜ` of tracked minor `k`.
    pub fn value_minor(&self, k: usize, gamma: T) -> T {
        self.steps
            .iter()
            .fold((T::zero(), T::one()), |(acc, g), s| (acc + g * s.minors[k].reward, g * gamma))
            .0
    }

    /// Largest `|p⁰ₜ + ∫p̄ dμₜ − 1|` along the path.
    pub fn max_mass_defect(&self, game: &Game<T>) -> T {
        self.steps
            .iter()
            .map(|s| {
                let mu = ProjectedMeasure::from_raw(s.measure.clone());
                (s.major_p + aggregate_minor_mass(&mu, &game.grid) - T::one()).abs()
            })
            .fold(T::zero(), T::max)
    }
}

/// Policies and tracked minors for a rollout.
pub struct Rollout<'a, T, M, N> {
    pub game: &'a Game<T>,
    pub major: M,
    pub minor: N,
    /// Initial states of individually tracked minor banks.
    pub tracked: Vec<BankState<T>>,
    pub support: SupportMode,
}

struct State<T> {
    t: usize,
    rc_index: usize,
    major: BankState<T>,
    mu: ProjectedMeasure<T>,
    tracked: Vec<BankState<T>>,
}

impl<'a, T: Scalar, M: MajorPolicy<T>, N: MinorPolicy<T>> Rollout<'a, T, M, N> {
    pub fn new(game: &'a Game<T>, major: M, minor: N) -> Self {
        Self {
            game,
            major,
            minor,
            tracked: Vec::new(),
            support: SupportMode::Strict,
        }
    }

    pub fn tracking(mut self, tracked: Vec<BankState<T>>) -> Self {
        self.tracked = tracked;
        self
    }

    pub fn support(mut self, support: SupportMode) -> Self {
        self.support = support;
        self
    }

    fn initial(&self) -> Result<State<T>> {
        let init = &self.game.initial;
        Ok(State {
            t: 0,
            rc_index: self.game.chain.index_of(init.cb_rate)?,
            major: init.major,
            mu: init.measure.clone(),
            tracked: self.tracked.clone(),
        })
    }

    /// Decides at `state`, records the step and returns the successor
    /// (pre-chain-move) pieces, or `None` at the horizon.
    fn advance(&self, s: &State<T>) -> Result<(Step<T>, Option<(BankState<T>, ProjectedMeasure<T>, Vec<BankState<T>>)>)> {
        let game = self.game;
        let params = &game.params;
        let rc = game.chain.rates()[s.rc_index];
        check_state(s.major, "major", params.rate_min, params.rate_max)?;
        let u0 = self.major.act(s.t, s.major, rc, &s.mu);
        let tracked_u = self.minor.act_many(s.t, s.major, rc, &s.mu, &s.tracked);
        let minors: Vec<MinorRecord<T>> = s
            .tracked
            .iter()
            .zip(&tracked_u)
            .map(|(x, &u)| MinorRecord {
                p: x.p,
                r: x.r,
                u,
                reward: reward_minor(*x, u, rc, params),
            })
            .collect();
        let step = Step {
            t: s.t,
            cb_rate: rc,
            major_p: s.major.p,
            major_r: s.major.r,
            major_u: u0,
            measure: s.mu.weights().to_vec(),
            reward_major: reward_major(s.major, u0, rc, params),
            minors,
        };
        if s.t + 1 >= params.horizon {
            return Ok((step, None));
        }
        let nodes = self.minor.node_actions(s.t, s.major, rc, &s.mu, &game.grid);
        let market = DecidedMarket::new(s.major.p, u0, &s.mu, &nodes, &game.grid)?;
        let (mu, clamped) = market.next_measure(&game.grid, params, self.support)?;
        if clamped > 0 {
            log::debug!("{clamped} atoms clamped at t = {}", s.t);
        }
        let next_major = market.next_major(params);
        let tracked = s
            .tracked
            .iter()
            .zip(&tracked_u)
            .map(|(x, &u)| market.next_minor(x.p, u, params))
            .collect();
        Ok((step, Some((next_major, mu, tracked))))
    }

    /// One path with the central bank rates drawn from `rng`.
    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Trajectory<T>> {
        let mut state = self.initial()?;
        let mut steps = Vec::with_capacity(self.game.params.horizon);
        loop {
            let (step, next) = self.advance(&state)?;
            steps.push(step);
            let Some((major, mu, tracked)) = next else { break };
            state = State {
                t: state.t + 1,
                rc_index: self.game.chain.sample_index(state.rc_index, rng),
                major,
                mu,
                tracked,
            };
        }
        Ok(Trajectory {
            probability: T::one(),
            steps,
        })
    }

    pub fn sampled<R: Rng + ?Sized>(&self, paths: usize, rng: &mut R) -> Result<Vec<Trajectory<T>>> {
        let w = T::one() / T::lit(paths as f64);
        (0..paths)
            .map(|_| {
                self.sample_path(rng).map(|mut tr| {
                    tr.probability = w;
                    tr
                })
            })
            .collect()
    }

    /// Every central bank path, in lexicographic order of rate indices.
    pub fn full_tree(&self) -> Result<Vec<Trajectory<T>>> {
        let mut out = Vec::new();
        self.expand(self.initial()?, T::one(), Vec::new(), &mut out)?;
        Ok(out)
    }

    fn expand(&self, state: State<T>, prob: T, mut prefix: Vec<Step<T>>, out: &mut Vec<Trajectory<T>>) -> Result<()> {
        let (step, next) = self.advance(&state)?;
        prefix.push(step);
        match next {
            None => out.push(Trajectory {
                probability: prob,
                steps: prefix,
            }),
            Some((major, mu, tracked)) => {
                let row = self.game.chain.row_at(state.rc_index);
                for (j, &pj) in row.iter().enumerate() {
                    let child = State {
                        t: state.t + 1,
                        rc_index: j,
                        major,
                        mu: mu.clone(),
                        tracked: tracked.clone(),
                    };
                    self.expand(child, prob * pj, prefix.clone(), out)?;
                }
            }
        }
        Ok(())
    }

    pub fn run<R: Rng + ?Sized>(&self, mode: RolloutMode, paths: usize, rng: &mut R) -> Result<Vec<Trajectory<T>>> {
        match mode {
            RolloutMode::Sampled => self.sampled(paths, rng),
            RolloutMode::FullTree => self.full_tree(),
        }
    }
}

fn check_state<T: Scalar>(x: BankState<T>, who: &str, r_min: T, r_max: T) -> Result<()> {
    if !(x.p >= T::zero() && x.p <= T::one() && x.r >= r_min && x.r <= r_max) {
        return Err(Error::StateOutOfBounds(format!("{who} state ({}, {})", x.p, x.r)));
    }
    Ok(())
}

/// Objective values of the major bank and of a weighted set of tracked
/// minors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate<T> {
    pub major: T,
    pub minor: T,
    /// Standard errors; zero for enumerated paths.
    pub major_se: T,
    pub minor_se: T,
    pub paths: usize,
}

/// `J⁰` and the `minor_weights`-average of the tracked minors' `J`.
pub fn value_estimate<T: Scalar>(
    trajectories: &[Trajectory<T>],
    minor_weights: &[T],
    gamma: T,
    mode: RolloutMode,
) -> ValueEstimate<T> {
    let per_path: Vec<(T, T, T)> = trajectories
        .iter()
        .map(|tr| {
            let minor = minor_weights
                .iter()
                .enumerate()
                .fold(T::zero(), |acc, (k, &w)| acc + w * tr.value_minor(k, gamma));
            (tr.probability, tr.value_major(gamma), minor)
        })
        .collect();
    let major = per_path.iter().fold(T::zero(), |a, &(p, v, _)| a + p * v);
    let minor = per_path.iter().fold(T::zero(), |a, &(p, _, v)| a + p * v);
    let n = per_path.len();
    let (major_se, minor_se) = match mode {
        RolloutMode::FullTree => (T::zero(), T::zero()),
        RolloutMode::Sampled if n > 1 => {
            let nn = T::lit(n as f64);
            let var = |f: &dyn Fn(&(T, T, T)) -> T, mean: T| {
                per_path.iter().map(|x| (f(x) - mean).powi(2)).sum::<T>() / (nn - T::one())
            };
            (
                (var(&|x| x.1, major) / nn).sqrt(),
                (var(&|x| x.2, minor) / nn).sqrt(),
            )
        }
        RolloutMode::Sampled => (T::zero(), T::zero()),
    };
    ValueEstimate {
        major,
        minor,
        major_se,
        minor_se,
        paths: n,
    }
}

/// Support nodes of the initial measure and their weights: the natural set
/// of representative minors for `J`.
pub fn initial_representatives<T: Scalar>(game: &Game<T>) -> (Vec<BankState<T>>, Vec<T>) {
    game.initial
        .measure
        .weights()
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > T::zero())
        .map(|(k, &w)| (game.grid.node(k), w))
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::CentralBankChain;
    use crate::policy::{ConstantRate, HoldRate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_tree_has_all_paths_with_unit_mass() {
        let game = Game::<f64>::default();
        let paths = Rollout::new(&game, HoldRate, HoldRate).full_tree().unwrap();
        assert_eq!(paths.len(), 81);
        let total: f64 = paths.iter().map(|p| p.probability).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(paths.iter().all(|p| p.steps.len() == 5));
    }

    #[test]
    fn equal_rates_keep_the_measure_fixed() {
        let mut game = Game::<f64>::default();
        let r = 0.029;
        game.initial.major = BankState::new(0.5, r);
        game.initial.measure = ProjectedMeasure::uniform_box(&game.grid, (0.4, 0.6), (r, r)).unwrap();
        let paths = Rollout::new(&game, HoldRate, HoldRate).full_tree().unwrap();
        for p in &paths {
            for s in &p.steps {
                assert_eq!(s.measure, game.initial.measure.weights());
                assert_eq!(s.major_p, 0.5);
            }
        }
    }

    #[test]
    fn constant_policy_value_closed_form() {
        let game = Game::<f64>::default();
        let u = 0.025;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tr = Rollout::new(&game, ConstantRate(u), ConstantRate(u)).sample_path(&mut rng).unwrap();
        let params = &game.params;
        let mut expected = 0.0;
        for s in &tr.steps {
            let cost = if s.t == 0 { params.cost_lin * 0.005 + params.cost_fix } else { 0.0 };
            expected += params.gamma.powi(s.t as i32) * (s.major_p * (s.cb_rate - u) - cost);
        }
        assert!((tr.value_major(params.gamma) - expected).abs() < 1e-15);
    }

    #[test]
    fn deterministic_chain_sampled_equals_tree() {
        let mut game = Game::<f64>::default();
        game.chain = CentralBankChain::jump_chain(vec![0.025, 0.03, 0.035], 0.0, 1.0).unwrap();
        let (reps, w) = initial_representatives(&game);
        let ro = Rollout::new(&game, ConstantRate(0.027), ConstantRate(0.031)).tracking(reps);
        let tree = ro.full_tree().unwrap();
        let tree_v = value_estimate(&tree, &w, 0.9, RolloutMode::FullTree);
        let sampled = ro.sampled(4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s_v = value_estimate(&sampled, &w, 0.9, RolloutMode::Sampled);
        assert!((tree_v.major - s_v.major).abs() < 1e-12);
        assert!((tree_v.minor - s_v.minor).abs() < 1e-12);
    }

    #[test]
    fn conservation_along_tree() {
        let game = Game::<f64>::default();
        let ro = Rollout::new(&game, ConstantRate(0.025), ConstantRate(0.035));
        for tr in ro.full_tree().unwrap() {
            assert!(tr.max_mass_defect(&game) < 1e-9);
        }
    }
}
