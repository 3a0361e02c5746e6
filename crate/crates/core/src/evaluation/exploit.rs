use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Game;
use crate::market::{linspace, reward_major, reward_minor, BankState};
use crate::measure::{DecidedMarket, ProjectedMeasure, SupportMode};
use crate::policy::{MajorPolicy, MinorPolicy};
use crate::scalar::Scalar;

/// Equilibrium play at one central bank history.
#[derive(Clone, Debug)]
pub struct FlowNode<T> {
    pub t: usize,
    pub rc_index: usize,
    /// Probability of reaching this history.
    pub probability: T,
    pub major: BankState<T>,
    pub major_action: T,
    pub measure: ProjectedMeasure<T>,
    pub market: DecidedMarket<T>,
    /// `(child index, transition probability)`.
    pub children: Vec<(usize, T)>,
}

/// The mean-field flow under fixed policies, one node per central bank
/// history. Parents precede their children.
#[derive(Clone, Debug)]
pub struct FlowTree<T> {
    nodes: Vec<FlowNode<T>>,
}

impl<T: Scalar> FlowTree<T> {
    pub fn build(game: &Game<T>, major: &impl MajorPolicy<T>, minor: &impl MinorPolicy<T>) -> Result<Self> {
        let params = &game.params;
        let mut nodes: Vec<FlowNode<T>> = Vec::new();
        let mut pending = vec![(
            0usize,
            game.chain.index_of(game.initial.cb_rate)?,
            T::one(),
            game.initial.major,
            game.initial.measure.clone(),
            None::<usize>,
        )];
        let mut head = 0;
        while head < pending.len() {
            let (t, rc_index, prob, x0, mu, parent) = pending[head].clone();
            head += 1;
            let rc = game.chain.rates()[rc_index];
            let u0 = major.act(t, x0, rc, &mu);
            let actions = minor.node_actions(t, x0, rc, &mu, &game.grid);
            let market = DecidedMarket::new(x0.p, u0, &mu, &actions, &game.grid)?;
            let idx = nodes.len();
            if let Some(p) = parent {
                let tp = game.chain.row_at(nodes[p].rc_index)[rc_index];
                nodes[p].children.push((idx, tp));
            }
            if t + 1 < params.horizon {
                let (next_mu, _) = market.next_measure(&game.grid, params, SupportMode::Strict)?;
                let next_major = market.next_major(params);
                let row = game.chain.row_at(rc_index);
                for (j, &pj) in row.iter().enumerate() {
                    pending.push((t + 1, j, prob * pj, next_major, next_mu.clone(), Some(idx)));
                }
            }
            nodes.push(FlowNode {
                t,
                rc_index,
                probability: prob,
                major: x0,
                major_action: u0,
                measure: mu,
                market,
                children: Vec::new(),
            });
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[FlowNode<T>] {
        &self.nodes
    }

    pub fn root(&self) -> &FlowNode<T> {
        &self.nodes[0]
    }
}

/// Clamped piecewise-linear interpolation of `values` (one per `grid`
/// point) at `x`.
pub fn interpolate<T: Scalar>(grid: &[T], values: impl Fn(usize) -> T, x: T) -> T {
    let n = grid.len();
    if n == 1 || x <= grid[0] {
        return values(0);
    }
    if x >= grid[n - 1] {
        return values(n - 1);
    }
    let i = grid.partition_point(|&g| g <= x) - 1;
    let frac = (x - grid[i]) / (grid[i + 1] - grid[i]);
    if frac == T::zero() {
        values(i)
    } else {
        values(i) * (T::one() - frac) + values(i + 1) * frac
    }
}

/// Discretization of a deviating minor's own state.
#[derive(Clone, Debug, PartialEq)]
pub struct MinorStateGrid<T> {
    pub p: Vec<T>,
    /// Action grid plus any initial rates not on it, sorted.
    pub r: Vec<T>,
}

impl<T: Scalar> MinorStateGrid<T> {
    pub fn new(game: &Game<T>, p_points: usize, initial_rates: &[T]) -> Result<Self> {
        if p_points < 2 {
            return Err(Error::InvalidParam {
                name: "p_points",
                reason: "need at least two points".into(),
            });
        }
        let p = linspace(game.params.prop_min, game.params.prop_max, p_points);
        let mut r: Vec<T> = game.actions.values().to_vec();
        for &x in initial_rates {
            if !r.contains(&x) {
                r.push(x);
            }
        }
        r.sort_by(|a, b| a.partial_cmp(b).expect("finite rates"));
        Ok(Self { p, r })
    }

    fn rate_index(&self, r: T) -> Result<usize> {
        let tol = T::lit(1e-12);
        self.r
            .iter()
            .position(|&x| (x - r).abs() <= tol)
            .ok_or(Error::UnknownRate(r.as_f64()))
    }

    fn len(&self) -> usize {
        self.p.len() * self.r.len()
    }
}

/// Value tables of a minor bank over the flow tree: `values[node][ip·nr + ir]`.
#[derive(Clone, Debug)]
pub struct MinorValues<T> {
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> MinorValues<T> {
    pub fn at(&self, states: &MinorStateGrid<T>, node: usize, x: BankState<T>) -> Result<T> {
        let ir = states.rate_index(x.r)?;
        let nr = states.r.len();
        Ok(interpolate(&states.p, |ip| self.values[node][ip * nr + ir], x.p))
    }
}

/// Backward induction for a minor bank facing the fixed flow. With
/// `policy = None` the bank maximizes over the action grid; otherwise it
/// follows `policy` at every state grid point.
pub fn minor_values<T: Scalar>(
    game: &Game<T>,
    tree: &FlowTree<T>,
    states: &MinorStateGrid<T>,
    policy: Option<&dyn MinorPolicy<T>>,
) -> Result<MinorValues<T>> {
    let params = &game.params;
    let nr = states.r.len();
    let grid_states: Vec<BankState<T>> = states
        .p
        .iter()
        .flat_map(|&p| states.r.iter().map(move |&r| BankState::new(p, r)))
        .collect();
    let mut values = vec![Vec::new(); tree.nodes.len()];
    for (idx, node) in tree.nodes.iter().enumerate().rev() {
        let rc = game.chain.rates()[node.rc_index];
        let disc = game.discount(node.t);
        let chosen = policy.map(|pi| pi.act_many(node.t, node.major, rc, &node.measure, &grid_states));
        let action_index: Vec<usize> = game
            .actions
            .values()
            .iter()
            .map(|&u| states.rate_index(u))
            .collect::<Result<_>>()?;
        let mut v = vec![T::zero(); states.len()];
        for (ip, &p) in states.p.iter().enumerate() {
            for ir in 0..nr {
                let x = BankState::new(p, states.r[ir]);
                let k = ip * nr + ir;
                let mut best = T::neg_infinity();
                let single;
                let candidates: &[T] = match &chosen {
                    Some(c) => {
                        single = [c[k]];
                        &single
                    }
                    None => game.actions.values(),
                };
                for (a, &u) in candidates.iter().enumerate() {
                    let mut val = disc * reward_minor(x, u, rc, params);
                    if !node.children.is_empty() {
                        let next_p = node.market.next_minor(p, u, params).p;
                        let iu = match chosen {
                            Some(_) => states.rate_index(u)?,
                            None => action_index[a],
                        };
                        let mut cont = T::zero();
                        for &(c, pc) in &node.children {
                            cont = cont + pc * interpolate(&states.p, |j| values[c][j * nr + iu], next_p);
                        }
                        val = val + cont;
                    }
                    if val > best {
                        best = val;
                    }
                }
                v[k] = best;
            }
        }
        values[idx] = v;
    }
    Ok(MinorValues { values })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinorGap<T> {
    /// Weighted on-policy value on the state grid.
    pub on_policy: T,
    pub best_response: T,
    pub gap: T,
    pub relative_gap: T,
    /// On-policy value from exact trajectories of the representatives.
    pub on_policy_exact: T,
    /// `|on_policy − on_policy_exact|`: size of the interpolation error.
    pub interpolation_error: T,
    pub p_points: usize,
}

/// Minor exploitability for representatives `reps` with weights `weights`.
pub fn best_response_minor<T: Scalar>(
    game: &Game<T>,
    major: &impl MajorPolicy<T>,
    minor: &impl MinorPolicy<T>,
    reps: &[BankState<T>],
    weights: &[T],
    p_points: usize,
) -> Result<MinorGap<T>> {
    let tree = FlowTree::build(game, major, minor)?;
    let rates: Vec<T> = reps.iter().map(|x| x.r).collect();
    let states = MinorStateGrid::new(game, p_points, &rates)?;
    let br = minor_values(game, &tree, &states, None)?;
    let on = minor_values(game, &tree, &states, Some(minor))?;
    let weighted = |vals: &MinorValues<T>| -> Result<T> {
        reps.iter()
            .zip(weights)
            .try_fold(T::zero(), |acc, (&x, &w)| Ok(acc + w * vals.at(&states, 0, x)?))
    };
    let best_response = weighted(&br)?;
    let on_policy = weighted(&on)?;
    let on_policy_exact = exact_minor_value(game, &tree, minor, reps, weights);
    let gap = best_response - on_policy;
    Ok(MinorGap {
        on_policy,
        best_response,
        gap,
        relative_gap: gap / on_policy.abs(),
        on_policy_exact,
        interpolation_error: (on_policy - on_policy_exact).abs(),
        p_points,
    })
}

/// Expected discounted reward of minors following `minor` exactly (no
/// state discretization) along the flow tree.
pub fn exact_minor_value<T: Scalar>(
    game: &Game<T>,
    tree: &FlowTree<T>,
    minor: &impl MinorPolicy<T>,
    reps: &[BankState<T>],
    weights: &[T],
) -> T {
    fn go<T: Scalar>(
        game: &Game<T>,
        tree: &FlowTree<T>,
        minor: &impl MinorPolicy<T>,
        idx: usize,
        xs: Vec<BankState<T>>,
        weights: &[T],
    ) -> T {
        let node = &tree.nodes[idx];
        let rc = game.chain.rates()[node.rc_index];
        let us = minor.act_many(node.t, node.major, rc, &node.measure, &xs);
        let disc = game.discount(node.t);
        let mut v = T::zero();
        for ((x, &u), &w) in xs.iter().zip(&us).zip(weights) {
            v = v + w * disc * reward_minor(*x, u, rc, &game.params);
        }
        if node.children.is_empty() {
            return v;
        }
        let next: Vec<BankState<T>> = xs
            .iter()
            .zip(&us)
            .map(|(x, &u)| node.market.next_minor(x.p, u, &game.params))
            .collect();
        let mut cont = T::zero();
        for &(c, pc) in &node.children {
            cont = cont + pc * go(game, tree, minor, c, next.clone(), weights);
        }
        v + cont
    }
    go(game, tree, minor, 0, reps.to_vec(), weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MajorGap<T> {
    /// Truncated objective `Σ_{t<horizon} γᵗ R⁰ₜ` under the learned policy.
    pub on_policy: T,
    pub best_response: T,
    pub gap: T,
    pub relative_gap: T,
    pub horizon: usize,
}

/// The major bank's choice set in a truncated tree search.
#[derive(Clone, Copy)]
pub enum MajorChoice<'a, T> {
    Best,
    Policy(&'a dyn MajorPolicy<T>),
}

#[derive(Clone)]
struct MajorNode<T> {
    major: BankState<T>,
    rc_index: usize,
    mu: ProjectedMeasure<T>,
}

fn check_budget<T: Scalar>(game: &Game<T>, horizon: usize, budget: u128) -> Result<()> {
    if horizon == 0 || horizon > game.params.horizon {
        return Err(Error::InvalidParam {
            name: "horizon",
            reason: format!("must lie in 1..={}", game.params.horizon),
        });
    }
    let branch = (game.actions.len() * game.chain.len()) as u128;
    let size = branch.checked_pow(horizon as u32).unwrap_or(u128::MAX);
    if size > budget {
        return Err(Error::TreeBudget { size, budget });
    }
    Ok(())
}

fn root_node<T: Scalar>(game: &Game<T>) -> Result<MajorNode<T>> {
    Ok(MajorNode {
        major: game.initial.major,
        rc_index: game.chain.index_of(game.initial.cb_rate)?,
        mu: game.initial.measure.clone(),
    })
}

fn candidate_actions<T: Scalar>(game: &Game<T>, choice: MajorChoice<'_, T>, t: usize, n: &MajorNode<T>) -> Vec<T> {
    match choice {
        MajorChoice::Best => game.actions.values().to_vec(),
        MajorChoice::Policy(pi) => vec![pi.act(t, n.major, game.chain.rates()[n.rc_index], &n.mu)],
    }
}

fn children<T: Scalar>(
    game: &Game<T>,
    n: &MajorNode<T>,
    u0: T,
    node_actions: &[T],
) -> Result<Vec<MajorNode<T>>> {
    let market = DecidedMarket::new(n.major.p, u0, &n.mu, node_actions, &game.grid)?;
    let (mu, clamped) = market.next_measure(&game.grid, &game.params, SupportMode::Clamp)?;
    if clamped > 0 {
        log::debug!("major search clamped {clamped} atoms");
    }
    let major = market.next_major(&game.params);
    Ok((0..game.chain.len())
        .map(|j| MajorNode {
            major,
            rc_index: j,
            mu: mu.clone(),
        })
        .collect())
}

/// Truncated major objective by breadth-first expansion of the whole
/// (action × central bank rate) tree followed by a backward reduction.
pub fn major_tree_value_bfs<T: Scalar>(
    game: &Game<T>,
    minor: &impl MinorPolicy<T>,
    horizon: usize,
    choice: MajorChoice<'_, T>,
    budget: u128,
) -> Result<T> {
    check_budget(game, horizon, budget)?;
    let params = &game.params;
    let nc = game.chain.len();
    // per level: nodes, and per node its actions, rewards and first child
    let mut levels: Vec<Vec<MajorNode<T>>> = vec![vec![root_node(game)?]];
    let mut expansions: Vec<Vec<(Vec<T>, Vec<T>, usize)>> = Vec::new();
    for t in 0..horizon {
        let mut next_level = Vec::new();
        let mut exp = Vec::new();
        for n in &levels[t] {
            let rc = game.chain.rates()[n.rc_index];
            let acts = candidate_actions(game, choice, t, n);
            let rewards: Vec<T> = acts.iter().map(|&u| reward_major(n.major, u, rc, params)).collect();
            let first = next_level.len();
            if t + 1 < horizon {
                let nodes = minor.node_actions(t, n.major, rc, &n.mu, &game.grid);
                for &u in &acts {
                    next_level.extend(children(game, n, u, &nodes)?);
                }
            }
            exp.push((acts, rewards, first));
        }
        expansions.push(exp);
        if t + 1 < horizon {
            levels.push(next_level);
        }
    }
    let mut below: Vec<T> = Vec::new();
    for t in (0..horizon).rev() {
        let disc = game.discount(t);
        let vals: Vec<T> = levels[t]
            .iter()
            .zip(&expansions[t])
            .map(|(n, (acts, rewards, first))| {
                let row = game.chain.row_at(n.rc_index);
                let mut best = T::neg_infinity();
                for (a, &r) in rewards.iter().enumerate().take(acts.len()) {
                    let mut cont = T::zero();
                    if t + 1 < horizon {
                        for (j, &pj) in row.iter().enumerate() {
                            cont = cont + pj * below[first + a * nc + j];
                        }
                    }
                    let v = disc * r + cont;
                    if v > best {
                        best = v;
                    }
                }
                best
            })
            .collect();
        below = vals;
    }
    Ok(below[0])
}

/// Same objective by depth-first recursion. With `prune`, actions whose
/// optimistic bound cannot beat the incumbent are skipped.
pub fn major_tree_value_dfs<T: Scalar>(
    game: &Game<T>,
    minor: &impl MinorPolicy<T>,
    horizon: usize,
    choice: MajorChoice<'_, T>,
    budget: u128,
    prune: bool,
) -> Result<T> {
    check_budget(game, horizon, budget)?;
    let params = &game.params;
    let max_rc = game
        .chain
        .rates()
        .iter()
        .fold(T::neg_infinity(), |a, &b| a.max(b));
    let min_u = game.actions.values()[0];
    let step_bound = params.total_deposits * (params.l_major + max_rc - min_u).max(T::zero());
    // bound[t] bounds Σ_{s ≥ t} γˢ R⁰ₛ
    let mut bound = vec![T::zero(); horizon + 1];
    for t in (0..horizon).rev() {
        bound[t] = bound[t + 1] + game.discount(t) * step_bound;
    }

    #[allow(clippy::too_many_arguments)]
    fn go<T: Scalar>(
        game: &Game<T>,
        minor: &impl MinorPolicy<T>,
        horizon: usize,
        choice: MajorChoice<'_, T>,
        prune: bool,
        bound: &[T],
        t: usize,
        n: &MajorNode<T>,
    ) -> Result<T> {
        let params = &game.params;
        let rc = game.chain.rates()[n.rc_index];
        let disc = game.discount(t);
        let acts = candidate_actions(game, choice, t, n);
        let nodes = if t + 1 < horizon {
            minor.node_actions(t, n.major, rc, &n.mu, &game.grid)
        } else {
            Vec::new()
        };
        let row = game.chain.row_at(n.rc_index);
        let mut best = T::neg_infinity();
        for &u in &acts {
            let r = reward_major(n.major, u, rc, params);
            if prune && disc * r + bound[t + 1] <= best {
                continue;
            }
            let mut cont = T::zero();
            if t + 1 < horizon {
                for (j, child) in children(game, n, u, &nodes)?.iter().enumerate() {
                    cont = cont + row[j] * go(game, minor, horizon, choice, prune, bound, t + 1, child)?;
                }
            }
            let v = disc * r + cont;
            if v > best {
                best = v;
            }
        }
        Ok(best)
    }
    go(game, minor, horizon, choice, prune, &bound, 0, &root_node(game)?)
}

/// Major exploitability on the truncated objective.
pub fn best_response_major<T: Scalar>(
    game: &Game<T>,
    major: &dyn MajorPolicy<T>,
    minor: &impl MinorPolicy<T>,
    horizon: usize,
    budget: u128,
) -> Result<MajorGap<T>> {
    let best_response = major_tree_value_bfs(game, minor, horizon, MajorChoice::Best, budget)?;
    let on_policy = major_tree_value_bfs(game, minor, horizon, MajorChoice::Policy(major), budget)?;
    let gap = best_response - on_policy;
    Ok(MajorGap {
        on_policy,
        best_response,
        gap,
        relative_gap: gap / on_policy.abs(),
        horizon,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExploitabilityReport<T> {
    pub major: MajorGap<T>,
    pub minor: MinorGap<T>,
}
