//! Fictitious-play deep Q-iteration.
//!
//! Each outer iteration freezes the greedy policies of the averaged
//! networks, fits fresh copies to the Bellman targets those policies induce,
//! and folds the fitted networks into the running average with weight
//! `1/(n+1)`.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Rollout;
use crate::features::{self, Encoder, LayoutDescriptor, NetRole};
use crate::game::Game;
use crate::market::{reward_major, reward_minor, BankState};
use crate::measure::{aggregate_minor_mass, DecidedMarket, ProjectedMeasure, SupportMode};
use crate::policy::{GreedyMajor, GreedyMinor, MajorPolicy, MinorPolicy};
use crate::qnet::{
    axpy, fp_average, Activation, AveragingMode, GradScratch, NetGradients, NeuronMeasure, OptimizerState,
};
use crate::scalar::Scalar;

/// How the major bank's share is drawn for a training sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MajorSampling {
    /// `p⁰ = 1 − ∫p̄ dμ`, so the sampled market is consistent.
    #[default]
    Conserved,
    /// Uniform on the proportion bounds, independent of `μ`.
    Uniform,
}

/// Treatment of the bootstrapped term in the loss gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Targets are constants.
    #[default]
    Detached,
    /// Differentiate through the continuation term as well.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub batch_size: usize,
    /// Hidden width `L` of both networks.
    pub width: usize,
    pub learning_rate: f64,
    pub activation: Activation,
    pub averaging: AveragingMode,
    /// Fraction of sampled measures taken from the replay of visited measures.
    pub replay_fraction: f64,
    pub replay_capacity: usize,
    /// Rollouts per outer iteration whose measures enter the replay.
    pub replay_paths: usize,
    pub major_sampling: MajorSampling,
    pub target_mode: TargetMode,
    /// Abort once a batch loss exceeds this value.
    pub divergence_threshold: f64,
    /// States on which the frozen policies are fingerprinted.
    pub probe_size: usize,
    pub record_wall_clock: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 100,
            inner_iterations: 400,
            batch_size: 240,
            width: 256,
            learning_rate: 1e-3,
            activation: Activation::Relu,
            averaging: AveragingMode::Paired,
            replay_fraction: 0.5,
            replay_capacity: 4096,
            replay_paths: 8,
            major_sampling: MajorSampling::Conserved,
            target_mode: TargetMode::Detached,
            divergence_threshold: 1e3,
            probe_size: 8,
            record_wall_clock: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("outer_iterations", self.outer_iterations),
            ("inner_iterations", self.inner_iterations),
            ("batch_size", self.batch_size),
            ("width", self.width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParam {
                    name,
                    reason: "must be >= 1".into(),
                });
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParam {
                name: "learning_rate",
                reason: "must be finite and >= 0".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(Error::InvalidParam {
                name: "replay_fraction",
                reason: "must lie in [0, 1]".into(),
            });
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::InvalidParam {
                name: "divergence_threshold",
                reason: "must be > 0".into(),
            });
        }
        Ok(())
    }
}

/// Losses of one inner step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub outer: usize,
    pub inner: usize,
    pub loss_major: f64,
    pub loss_minor: f64,
    /// Milliseconds since training started, when recorded.
    pub wall_ms: Option<f64>,
}

/// One training input: both banks' states and actions, the central bank
/// rate and the projected measure.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub t: usize,
    pub major: BankState<T>,
    pub major_action: T,
    pub minor: BankState<T>,
    pub minor_action: T,
    pub cb_rate: T,
    pub measure: ProjectedMeasure<T>,
}

/// Flat Dirichlet draw over `n` nodes.
pub fn flat_simplex<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> ProjectedMeasure<T> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    ProjectedMeasure::from_raw(draws.into_iter().map(|x| T::lit(x / total)).collect())
}

fn pick<T: Copy, R: Rng + ?Sized>(values: &[T], rng: &mut R) -> T {
    values[rng.gen_range(0..values.len())]
}

pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    game: &Game<T>,
    config: &TrainConfig,
    replay: &[ProjectedMeasure<T>],
) -> Vec<Sample<T>> {
    let params = &game.params;
    let actions = game.actions.values();
    let (lo, hi) = (params.prop_min.as_f64(), params.prop_max.as_f64());
    (0..config.batch_size)
        .map(|_| {
            let t = rng.gen_range(0..params.horizon);
            let measure = if !replay.is_empty() && rng.gen::<f64>() < config.replay_fraction {
                replay[rng.gen_range(0..replay.len())].clone()
            } else {
                flat_simplex(game.grid.len(), rng)
            };
            let p0 = match config.major_sampling {
                MajorSampling::Conserved => {
                    (T::one() - aggregate_minor_mass(&measure, &game.grid)).max(T::zero()).min(T::one())
                }
                MajorSampling::Uniform => T::lit(rng.gen_range(lo..=hi)),
            };
            let major = BankState::new(p0, pick(actions, rng));
            let major_action = pick(actions, rng);
            let minor = BankState::new(T::lit(rng.gen_range(lo..=hi)), pick(actions, rng));
            let minor_action = pick(actions, rng);
            let cb_rate = pick(game.chain.rates(), rng);
            Sample {
                t,
                major,
                major_action,
                minor,
                minor_action,
                cb_rate,
                measure,
            }
        })
        .collect()
}

/// `max_ũ Σ_r̃ P(r̃|r^c) Q(z(ũ, r̃))` where `pre` holds the preactivations
/// with the action and central bank slots zeroed. Returns the value and the
/// maximizing action index.
fn expected_max<T: Scalar>(
    q: &NeuronMeasure<T>,
    pre: &[T],
    role: NetRole,
    row: &[T],
    cb_shifts: &[T],
    action_shifts: &[T],
    buf: &mut Vec<T>,
    acc: &mut Vec<T>,
) -> (T, usize) {
    acc.clear();
    acc.resize(action_shifts.len(), T::zero());
    let cb_col = q.column(role.cb_slot());
    for (j, &pj) in row.iter().enumerate() {
        if pj == T::zero() {
            continue;
        }
        buf.clear();
        buf.extend_from_slice(pre);
        axpy(buf, cb_shifts[j], cb_col);
        for (a, &s) in action_shifts.iter().enumerate() {
            acc[a] = acc[a] + pj * q.readout_shifted(buf, role.action_slot(), s);
        }
    }
    let mut best = (T::neg_infinity(), 0);
    for (a, &v) in acc.iter().enumerate() {
        if v > best.0 {
            best = (v, a);
        }
    }
    best
}

/// Encoded action and central bank values plus reusable buffers.
struct TargetEngine<'a, T> {
    game: &'a Game<T>,
    encoder: Encoder<T>,
    action_shifts: Vec<T>,
    cb_shifts: Vec<T>,
    z: Vec<T>,
    pre: Vec<T>,
    buf: Vec<T>,
    acc: Vec<T>,
}

/// A Bellman target and, when it bootstraps, the maximizing next action.
#[derive(Clone, Copy, Debug)]
struct Target<T> {
    value: T,
    next: Option<usize>,
}

/// Next-step pieces shared by a target: time, states and measure.
struct NextState<T> {
    major: BankState<T>,
    minor: Option<BankState<T>>,
    measure: ProjectedMeasure<T>,
}

impl<'a, T: Scalar> TargetEngine<'a, T> {
    fn new(game: &'a Game<T>) -> Self {
        let encoder = Encoder::new(&game.params);
        let action_shifts = game.actions.values().iter().map(|&u| encoder.rate(u)).collect();
        let cb_shifts = game.chain.rates().iter().map(|&r| encoder.rate(r)).collect();
        Self {
            game,
            encoder,
            action_shifts,
            cb_shifts,
            z: Vec::new(),
            pre: Vec::new(),
            buf: Vec::new(),
            acc: Vec::new(),
        }
    }

    fn continuation(&mut self, q: &NeuronMeasure<T>, role: NetRole, t: usize, s: &NextState<T>, rc_index: usize) -> (T, usize) {
        self.z.clear();
        self.z.resize(q.input_dim(), T::zero());
        match role {
            NetRole::Major => {
                self.encoder.major_into(&mut self.z, t, s.major, T::zero(), T::zero(), &s.measure);
                self.z[features::major::ACTION] = T::zero();
                self.z[features::major::CB_RATE] = T::zero();
            }
            NetRole::Minor => {
                let x = s.minor.expect("minor continuation needs the minor state");
                self.encoder.minor_into(&mut self.z, t, s.major, x, T::zero(), T::zero(), &s.measure);
                self.z[features::minor::ACTION] = T::zero();
                self.z[features::minor::CB_RATE] = T::zero();
            }
        }
        self.pre.resize(q.width(), T::zero());
        q.preactivations_into(&self.z, &mut self.pre);
        let row = self.game.chain.row_at(rc_index);
        expected_max(q, &self.pre, role, row, &self.cb_shifts, &self.action_shifts, &mut self.buf, &mut self.acc)
    }

    /// Inputs `z(ũ, r̃)` of the continuation for each central bank rate with
    /// its probability.
    fn continuation_inputs(&self, role: NetRole, t: usize, s: &NextState<T>, rc_index: usize, a: usize) -> Vec<(Vec<T>, T)> {
        let rates = self.game.chain.rates();
        let u = self.game.actions.values()[a];
        self.game
            .chain
            .row_at(rc_index)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > T::zero())
            .map(|(j, &p)| {
                let z = match role {
                    NetRole::Major => self.encoder.major(t, s.major, u, rates[j], &s.measure),
                    NetRole::Minor => {
                        self.encoder
                            .minor(t, s.major, s.minor.expect("minor state"), u, rates[j], &s.measure)
                    }
                };
                (z, p)
            })
            .collect()
    }
}

fn next_major_state<T: Scalar>(
    game: &Game<T>,
    sample: &Sample<T>,
    major_action: T,
    node_actions: &[T],
    minor_action: Option<T>,
) -> Result<NextState<T>> {
    let market = DecidedMarket::new(sample.major.p, major_action, &sample.measure, node_actions, &game.grid)?;
    let (measure, _) = market.next_measure(&game.grid, &game.params, SupportMode::Clamp)?;
    Ok(NextState {
        major: market.next_major(&game.params),
        minor: minor_action.map(|u| market.next_minor(sample.minor.p, u, &game.params)),
        measure,
    })
}

fn major_target<T: Scalar>(
    engine: &mut TargetEngine<'_, T>,
    sample: &Sample<T>,
    q: &NeuronMeasure<T>,
    node_actions: &[T],
) -> Result<(Target<T>, Option<NextState<T>>)> {
    let game = engine.game;
    let reward = game.discount(sample.t) * reward_major(sample.major, sample.major_action, sample.cb_rate, &game.params);
    if sample.t + 1 >= game.params.horizon {
        return Ok((Target { value: reward, next: None }, None));
    }
    let next = next_major_state(game, sample, sample.major_action, node_actions, None)?;
    let rc_index = game.chain.index_of(sample.cb_rate)?;
    let (cont, a) = engine.continuation(q, NetRole::Major, sample.t + 1, &next, rc_index);
    Ok((
        Target {
            value: reward + cont,
            next: Some(a),
        },
        Some(next),
    ))
}

fn minor_target<T: Scalar>(
    engine: &mut TargetEngine<'_, T>,
    sample: &Sample<T>,
    q: &NeuronMeasure<T>,
    frozen_major_action: T,
    node_actions: &[T],
) -> Result<(Target<T>, Option<NextState<T>>)> {
    let game = engine.game;
    let reward = game.discount(sample.t) * reward_minor(sample.minor, sample.minor_action, sample.cb_rate, &game.params);
    if sample.t + 1 >= game.params.horizon {
        return Ok((Target { value: reward, next: None }, None));
    }
    let next = next_major_state(game, sample, frozen_major_action, node_actions, Some(sample.minor_action))?;
    let rc_index = game.chain.index_of(sample.cb_rate)?;
    let (cont, a) = engine.continuation(q, NetRole::Minor, sample.t + 1, &next, rc_index);
    Ok((
        Target {
            value: reward + cont,
            next: Some(a),
        },
        Some(next),
    ))
}

/// Bellman target of the major network: discounted reward plus, before the
/// horizon, the best expected continuation under the minors' frozen policy.
pub fn bellman_target_major<T: Scalar>(
    game: &Game<T>,
    sample: &Sample<T>,
    q: &NeuronMeasure<T>,
    minor_policy: &impl MinorPolicy<T>,
) -> Result<T> {
    let nodes = if sample.t + 1 < game.params.horizon {
        minor_policy.node_actions(sample.t, sample.major, sample.cb_rate, &sample.measure, &game.grid)
    } else {
        Vec::new()
    };
    let mut engine = TargetEngine::new(game);
    Ok(major_target(&mut engine, sample, q, &nodes)?.0.value)
}

/// Bellman target of the minor network. The major bank posts the frozen
/// major policy's rate and the population follows the frozen minor policy.
pub fn bellman_target_minor<T: Scalar>(
    game: &Game<T>,
    sample: &Sample<T>,
    q: &NeuronMeasure<T>,
    major_policy: &impl MajorPolicy<T>,
    minor_policy: &impl MinorPolicy<T>,
) -> Result<T> {
    let (u0, nodes) = if sample.t + 1 < game.params.horizon {
        (
            major_policy.act(sample.t, sample.major, sample.cb_rate, &sample.measure),
            minor_policy.node_actions(sample.t, sample.major, sample.cb_rate, &sample.measure, &game.grid),
        )
    } else {
        (sample.major_action, Vec::new())
    };
    let mut engine = TargetEngine::new(game);
    Ok(minor_target(&mut engine, sample, q, u0, &nodes)?.0.value)
}

/// Greedy policies of a pair of networks.
#[derive(Clone, Debug)]
pub struct Frozen<T> {
    pub major: GreedyMajor<T>,
    pub minor: GreedyMinor<T>,
}

impl<T: Scalar> Frozen<T> {
    pub fn new(game: &Game<T>, major: &NeuronMeasure<T>, minor: &NeuronMeasure<T>) -> Result<Self> {
        Ok(Self {
            major: GreedyMajor::new(major.clone(), &game.params, game.actions.clone(), game.grid.len())?,
            minor: GreedyMinor::new(minor.clone(), &game.params, game.actions.clone(), game.grid.len())?,
        })
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub scalar: String,
    pub completed_outer: usize,
    pub config: TrainConfig,
    pub major_layout: LayoutDescriptor,
    pub minor_layout: LayoutDescriptor,
    /// Averaged networks; their greedy policies are the learned controls.
    pub major: NeuronMeasure<T>,
    pub minor: NeuronMeasure<T>,
    /// Networks being fitted.
    pub live_major: NeuronMeasure<T>,
    pub live_minor: NeuronMeasure<T>,
    pub optimizer_major: OptimizerState<T>,
    pub optimizer_minor: OptimizerState<T>,
    pub rng: ChaCha8Rng,
    pub replay: Vec<ProjectedMeasure<T>>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl<T: Scalar> Checkpoint<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        if c.scalar != T::NAME {
            return Err(Error::Checkpoint(format!("stored as {}, loaded as {}", c.scalar, T::NAME)));
        }
        Ok(c)
    }
}

/// Averaged networks after some outer iterations: all that is needed to
/// act, roll out or evaluate. A full [`Checkpoint`] parses as one too.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint<T> {
    pub version: u32,
    pub scalar: String,
    pub completed_outer: usize,
    pub major_layout: LayoutDescriptor,
    pub minor_layout: LayoutDescriptor,
    pub major: NeuronMeasure<T>,
    pub minor: NeuronMeasure<T>,
}

impl<T: Scalar> PolicyCheckpoint<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        if c.scalar != T::NAME {
            return Err(Error::Checkpoint(format!("stored as {}, loaded as {}", c.scalar, T::NAME)));
        }
        Ok(c)
    }

    pub fn cast<U: Scalar>(&self) -> PolicyCheckpoint<U> {
        PolicyCheckpoint {
            version: self.version,
            scalar: U::NAME.to_string(),
            completed_outer: self.completed_outer,
            major_layout: self.major_layout.clone(),
            minor_layout: self.minor_layout.clone(),
            major: self.major.cast(),
            minor: self.minor.cast(),
        }
    }
}

/// Summary of one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct OuterReport {
    pub outer: usize,
    pub records: Vec<TrainRecord>,
    pub probe_hash: u64,
}

struct Probe<T> {
    t: usize,
    major: BankState<T>,
    cb_rate: T,
    measure: ProjectedMeasure<T>,
}

pub struct Trainer<T> {
    game: Game<T>,
    config: TrainConfig,
    major: NeuronMeasure<T>,
    minor: NeuronMeasure<T>,
    live_major: NeuronMeasure<T>,
    live_minor: NeuronMeasure<T>,
    opt_major: OptimizerState<T>,
    opt_minor: OptimizerState<T>,
    rng: ChaCha8Rng,
    replay: VecDeque<ProjectedMeasure<T>>,
    completed: usize,
    probes: Vec<Probe<T>>,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(game: Game<T>, config: TrainConfig) -> Result<Self> {
        game.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = game.grid.len();
        let major = NeuronMeasure::random(NetRole::Major.input_dim(n), config.width, config.activation, &mut rng);
        let minor = NeuronMeasure::random(NetRole::Minor.input_dim(n), config.width, config.activation, &mut rng);
        let lr = T::lit(config.learning_rate);
        let probes = Self::probes(&game, &config);
        Ok(Self {
            opt_major: OptimizerState::for_net(&major, lr),
            opt_minor: OptimizerState::for_net(&minor, lr),
            live_major: major.clone(),
            live_minor: minor.clone(),
            major,
            minor,
            rng,
            replay: VecDeque::new(),
            completed: 0,
            probes,
            game,
            config,
            started: Instant::now(),
        })
    }

    pub fn from_checkpoint(game: Game<T>, checkpoint: Checkpoint<T>) -> Result<Self> {
        game.validate()?;
        checkpoint.config.validate()?;
        let n = game.grid.len();
        for (net, role) in [
            (&checkpoint.major, NetRole::Major),
            (&checkpoint.live_major, NetRole::Major),
            (&checkpoint.minor, NetRole::Minor),
            (&checkpoint.live_minor, NetRole::Minor),
        ] {
            if net.input_dim() != role.input_dim(n) {
                return Err(Error::Dimension {
                    expected: role.input_dim(n),
                    got: net.input_dim(),
                });
            }
        }
        let probes = Self::probes(&game, &checkpoint.config);
        Ok(Self {
            major: checkpoint.major,
            minor: checkpoint.minor,
            live_major: checkpoint.live_major,
            live_minor: checkpoint.live_minor,
            opt_major: checkpoint.optimizer_major,
            opt_minor: checkpoint.optimizer_minor,
            rng: checkpoint.rng,
            replay: checkpoint.replay.into(),
            completed: checkpoint.completed_outer,
            probes,
            game,
            config: checkpoint.config,
            started: Instant::now(),
        })
    }

    fn probes(game: &Game<T>, config: &TrainConfig) -> Vec<Probe<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        (0..config.probe_size)
            .map(|_| {
                let measure = flat_simplex(game.grid.len(), &mut rng);
                let p0 = T::one() - aggregate_minor_mass(&measure, &game.grid);
                Probe {
                    t: rng.gen_range(0..game.params.horizon),
                    major: BankState::new(p0, pick(game.actions.values(), &mut rng)),
                    cb_rate: pick(game.chain.rates(), &mut rng),
                    measure,
                }
            })
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let n = self.game.grid.len();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.to_string(),
            completed_outer: self.completed,
            config: self.config.clone(),
            major_layout: LayoutDescriptor::new(NetRole::Major, n),
            minor_layout: LayoutDescriptor::new(NetRole::Minor, n),
            major: self.major.clone(),
            minor: self.minor.clone(),
            live_major: self.live_major.clone(),
            live_minor: self.live_minor.clone(),
            optimizer_major: self.opt_major.clone(),
            optimizer_minor: self.opt_minor.clone(),
            rng: self.rng.clone(),
            replay: self.replay.iter().cloned().collect(),
        }
    }

    pub fn policy_checkpoint(&self) -> PolicyCheckpoint<T> {
        let n = self.game.grid.len();
        PolicyCheckpoint {
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.to_string(),
            completed_outer: self.completed,
            major_layout: LayoutDescriptor::new(NetRole::Major, n),
            minor_layout: LayoutDescriptor::new(NetRole::Minor, n),
            major: self.major.clone(),
            minor: self.minor.clone(),
        }
    }

    pub fn game(&self) -> &Game<T> {
        &self.game
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn is_done(&self) -> bool {
        self.completed >= self.config.outer_iterations
    }

    /// Averaged networks.
    pub fn networks(&self) -> (&NeuronMeasure<T>, &NeuronMeasure<T>) {
        (&self.major, &self.minor)
    }

    pub fn live_networks(&self) -> (&NeuronMeasure<T>, &NeuronMeasure<T>) {
        (&self.live_major, &self.live_minor)
    }

    pub fn replay(&self) -> impl Iterator<Item = &ProjectedMeasure<T>> {
        self.replay.iter()
    }

    pub fn policies(&self) -> Result<Frozen<T>> {
        Frozen::new(&self.game, &self.major, &self.minor)
    }

    /// Fingerprint of the decisions of `frozen` on the probe states.
    pub fn probe_hash(&self, frozen: &Frozen<T>) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.probes {
            frozen.major.act(p.t, p.major, p.cb_rate, &p.measure).as_f64().to_bits().hash(&mut h);
            for u in frozen.minor.node_actions(p.t, p.major, p.cb_rate, &p.measure, &self.game.grid) {
                u.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// One optimizer step on each network against targets induced by
    /// `frozen`. Returns the two batch losses.
    pub fn inner_step(&mut self, frozen: &Frozen<T>) -> Result<(T, T)> {
        let game = &self.game;
        self.replay.make_contiguous();
        let replay = self.replay.as_slices().0;
        let batch = sample_batch(&mut self.rng, game, &self.config, replay);
        let b = batch.len();
        let n = game.grid.len();
        let (dm, dn) = (NetRole::Major.input_dim(n), NetRole::Minor.input_dim(n));
        let encoder = Encoder::new(&game.params);
        let mut engine = TargetEngine::new(game);
        let mut in_major = vec![T::zero(); b * dm];
        let mut in_minor = vec![T::zero(); b * dn];
        let mut t_major = Vec::with_capacity(b);
        let mut t_minor = Vec::with_capacity(b);
        let residual = self.config.target_mode == TargetMode::Residual;
        let mut next_major: Vec<Option<(NextState<T>, usize)>> = Vec::new();
        let mut next_minor: Vec<Option<(NextState<T>, usize)>> = Vec::new();
        for (i, s) in batch.iter().enumerate() {
            encoder.major_into(&mut in_major[i * dm..(i + 1) * dm], s.t, s.major, s.major_action, s.cb_rate, &s.measure);
            encoder.minor_into(
                &mut in_minor[i * dn..(i + 1) * dn],
                s.t,
                s.major,
                s.minor,
                s.minor_action,
                s.cb_rate,
                &s.measure,
            );
            let bootstraps = s.t + 1 < game.params.horizon;
            let (nodes, u0) = if bootstraps {
                (
                    frozen.minor.node_actions(s.t, s.major, s.cb_rate, &s.measure, &game.grid),
                    frozen.major.act(s.t, s.major, s.cb_rate, &s.measure),
                )
            } else {
                (Vec::new(), s.major_action)
            };
            let (tm, nm) = major_target(&mut engine, s, &self.live_major, &nodes)?;
            let (tn, nn) = minor_target(&mut engine, s, &self.live_minor, u0, &nodes)?;
            t_major.push(tm.value);
            t_minor.push(tn.value);
            if residual {
                next_major.push(nm.zip(tm.next));
                next_minor.push(nn.zip(tn.next));
            }
        }
        let (loss_major, mut g_major) = self.live_major.loss_and_gradients(&in_major, &t_major)?;
        let (loss_minor, mut g_minor) = self.live_minor.loss_and_gradients(&in_minor, &t_minor)?;
        if residual {
            let rc_index = |s: &Sample<T>| game.chain.index_of(s.cb_rate);
            for (role, net, inputs, targets, nexts, grads, d) in [
                (NetRole::Major, &self.live_major, &in_major, &t_major, &next_major, &mut g_major, dm),
                (NetRole::Minor, &self.live_minor, &in_minor, &t_minor, &next_minor, &mut g_minor, dn),
            ] {
                let mut scratch = GradScratch::new(net.width());
                for (i, s) in batch.iter().enumerate() {
                    let Some((next, a)) = &nexts[i] else { continue };
                    let e = net.forward(&inputs[i * d..(i + 1) * d])? - targets[i];
                    let coeff = -T::lit(2.0) * e / T::lit(b as f64);
                    for (z, p) in engine.continuation_inputs(role, s.t + 1, next, rc_index(s)?, *a) {
                        net.accumulate_gradient(&z, coeff * p, grads, &mut scratch, false);
                    }
                }
            }
        }
        let outer = self.completed;
        for loss in [loss_major, loss_minor] {
            if !loss.is_finite() || loss.as_f64() > self.config.divergence_threshold {
                return Err(Error::Diverged {
                    outer,
                    inner: self.opt_major.step as usize,
                    loss: loss.as_f64(),
                });
            }
        }
        apply(&mut self.opt_major, &mut self.live_major, &mut g_major)?;
        apply(&mut self.opt_minor, &mut self.live_minor, &mut g_minor)?;
        Ok((loss_major, loss_minor))
    }

    /// `M` inner steps against fixed policies.
    pub fn inner_loop(&mut self, frozen: &Frozen<T>) -> Result<Vec<TrainRecord>> {
        let outer = self.completed;
        (0..self.config.inner_iterations)
            .map(|m| {
                let (a, b) = self.inner_step(frozen).map_err(|e| match e {
                    Error::Diverged { loss, .. } => Error::Diverged { outer, inner: m, loss },
                    e => e,
                })?;
                Ok(TrainRecord {
                    outer,
                    inner: m,
                    loss_major: a.as_f64(),
                    loss_minor: b.as_f64(),
                    wall_ms: self
                        .config
                        .record_wall_clock
                        .then(|| self.started.elapsed().as_secs_f64() * 1e3),
                })
            })
            .collect()
    }

    /// Freeze, fit, average, refresh the replay.
    pub fn outer_iteration(&mut self) -> Result<OuterReport> {
        let n = self.completed;
        let frozen = self.policies()?;
        let before = self.probe_hash(&frozen);
        match self.config.averaging {
            AveragingMode::ExactConcat => {}
            AveragingMode::Paired => {
                self.live_major = self.major.clone();
                self.live_minor = self.minor.clone();
            }
            AveragingMode::Resample => {
                self.live_major = self.major.clone();
                self.live_minor = self.minor.clone();
                self.opt_major.reset(self.live_major.num_params());
                self.opt_minor.reset(self.live_minor.num_params());
            }
        }
        let records = self.inner_loop(&frozen)?;
        let after = self.probe_hash(&frozen);
        if before != after {
            return Err(Error::Internal("frozen policies changed during the inner loop".into()));
        }
        let w = T::lit(n as f64 / (n as f64 + 1.0));
        self.major = fp_average(&self.major, &self.live_major, w, self.config.averaging, &mut self.rng)?;
        self.minor = fp_average(&self.minor, &self.live_minor, w, self.config.averaging, &mut self.rng)?;
        self.refresh_replay()?;
        self.completed += 1;
        Ok(OuterReport {
            outer: n,
            records,
            probe_hash: before,
        })
    }

    fn refresh_replay(&mut self) -> Result<()> {
        if self.config.replay_paths == 0 || self.config.replay_capacity == 0 {
            return Ok(());
        }
        let policies = self.policies()?;
        let paths = Rollout::new(&self.game, &policies.major, &policies.minor)
            .support(SupportMode::Clamp)
            .sampled(self.config.replay_paths, &mut self.rng)?;
        for tr in paths {
            for s in tr.steps {
                if self.replay.len() == self.config.replay_capacity {
                    self.replay.pop_front();
                }
                self.replay.push_back(ProjectedMeasure::from_raw(s.measure));
            }
        }
        Ok(())
    }

    /// Runs the remaining outer iterations, calling `on_outer` after each.
    pub fn run(&mut self, mut on_outer: impl FnMut(&Self, &OuterReport) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let report = self.outer_iteration()?;
            log::info!(
                "outer {} done: last losses {:.3e} / {:.3e}",
                report.outer,
                report.records.last().map_or(f64::NAN, |r| r.loss_major),
                report.records.last().map_or(f64::NAN, |r| r.loss_minor)
            );
            on_outer(self, &report)?;
        }
        Ok(())
    }
}

fn apply<T: Scalar>(opt: &mut OptimizerState<T>, net: &mut NeuronMeasure<T>, grads: &mut NetGradients<T>) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            outer: 0,
            inner: opt.step as usize,
            loss: f64::NAN,
        });
    }
    opt.step(net, grads)
}

/// Final networks and the loss history of a completed run.
pub struct TrainOutput<T> {
    pub major: NeuronMeasure<T>,
    pub minor: NeuronMeasure<T>,
    pub records: Vec<TrainRecord>,
}

/// Full training run; `on_checkpoint` receives one checkpoint per outer
/// iteration.
pub fn outer_loop<T: Scalar>(
    game: Game<T>,
    config: TrainConfig,
    mut on_checkpoint: impl FnMut(Checkpoint<T>) -> Result<()>,
) -> Result<TrainOutput<T>> {
    let mut trainer = Trainer::new(game, config)?;
    let mut records = Vec::new();
    trainer.run(|tr, report| {
        records.extend_from_slice(&report.records);
        on_checkpoint(tr.checkpoint())
    })?;
    Ok(TrainOutput {
        major: trainer.major,
        minor: trainer.minor,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ConstantRate, HoldRate};
    use crate::qnet::Neuron;

    fn small(seed: u64) -> TrainConfig {
        TrainConfig {
            outer_iterations: 3,
            inner_iterations: 5,
            batch_size: 12,
            width: 8,
            replay_paths: 2,
            probe_size: 3,
            seed,
            ..TrainConfig::default()
        }
    }

    fn sample(game: &Game<f64>, t: usize) -> Sample<f64> {
        let measure = game.initial.measure.clone();
        Sample {
            t,
            major: game.initial.major,
            major_action: 0.027,
            minor: BankState::new(0.45, 0.031),
            minor_action: 0.033,
            cb_rate: 0.035,
            measure,
        }
    }

    /// `β · relu(a · z_action + b)` on a single neuron.
    fn action_linear(dim: usize, slot: usize, a: f64, b: f64, beta: f64) -> NeuronMeasure<f64> {
        let mut in_weights = vec![0.0; dim];
        in_weights[slot] = a;
        NeuronMeasure::from_neurons(Activation::Relu, &[Neuron { out_weight: beta, in_weights, bias: b }]).unwrap()
    }

    #[test]
    fn sampled_batches_are_admissible() {
        let game = Game::<f64>::default();
        let cfg = TrainConfig { batch_size: 200, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in sample_batch(&mut rng, &game, &cfg, &[]) {
            assert!(s.t < game.params.horizon);
            assert!((s.measure.total() - 1.0).abs() < 1e-12);
            assert!(s.measure.weights().iter().all(|&w| w >= 0.0));
            let m = aggregate_minor_mass(&s.measure, &game.grid);
            assert!((s.major.p + m - 1.0).abs() < 1e-12 || s.major.p == 0.0);
            for u in [s.major.r, s.major_action, s.minor.r, s.minor_action] {
                assert!(game.actions.values().contains(&u));
            }
            assert!(game.chain.rates().contains(&s.cb_rate));
            assert!((0.2..=0.8).contains(&s.minor.p));
        }
    }

    #[test]
    fn replay_fraction_selects_the_source() {
        let game = Game::<f64>::default();
        let replay = vec![ProjectedMeasure::dirac(game.grid.len(), 7)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let all = TrainConfig { replay_fraction: 1.0, batch_size: 50, ..TrainConfig::default() };
        assert!(sample_batch(&mut rng, &game, &all, &replay).iter().all(|s| s.measure == replay[0]));
        let none = TrainConfig { replay_fraction: 0.0, ..all };
        assert!(sample_batch(&mut rng, &game, &none, &replay).iter().all(|s| s.measure != replay[0]));
    }

    #[test]
    fn terminal_targets_are_discounted_rewards() {
        let game = Game::<f64>::default();
        let s = sample(&game, game.params.horizon - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = game.grid.len();
        let qm = NeuronMeasure::random(NetRole::Major.input_dim(n), 4, Activation::Relu, &mut rng);
        let qn = NeuronMeasure::random(NetRole::Minor.input_dim(n), 4, Activation::Relu, &mut rng);
        let d = game.params.gamma.powi(4);
        let tm = bellman_target_major(&game, &s, &qm, &HoldRate).unwrap();
        assert_eq!(tm, d * reward_major(s.major, s.major_action, s.cb_rate, &game.params));
        let tn = bellman_target_minor(&game, &s, &qn, &HoldRate, &HoldRate).unwrap();
        assert_eq!(tn, d * reward_minor(s.minor, s.minor_action, s.cb_rate, &game.params));
    }

    #[test]
    fn constant_network_adds_its_value() {
        let game = Game::<f64>::default();
        let s = sample(&game, 1);
        let n = game.grid.len();
        let c = |dim| {
            NeuronMeasure::from_neurons(
                Activation::Relu,
                &[Neuron { out_weight: 3.0, in_weights: vec![0.0; dim], bias: 0.5 }],
            )
            .unwrap()
        };
        let g = game.params.gamma;
        let tm = bellman_target_major(&game, &s, &c(NetRole::Major.input_dim(n)), &HoldRate).unwrap();
        let rm = g * reward_major(s.major, s.major_action, s.cb_rate, &game.params);
        assert!((tm - (rm + 1.5)).abs() < 1e-12);
        let tn = bellman_target_minor(&game, &s, &c(NetRole::Minor.input_dim(n)), &HoldRate, &HoldRate).unwrap();
        let rn = g * reward_minor(s.minor, s.minor_action, s.cb_rate, &game.params);
        assert!((tn - (rn + 1.5)).abs() < 1e-12);
    }

    #[test]
    fn continuation_maximizes_over_actions() {
        let game = Game::<f64>::default();
        let s = sample(&game, 0);
        let n = game.grid.len();
        let rm = reward_major(s.major, s.major_action, s.cb_rate, &game.params);
        let rn = reward_minor(s.minor, s.minor_action, s.cb_rate, &game.params);
        // Encoded actions run from 0 (2.5%) to 1 (3.5%).
        for (a, best) in [(2.0, 2.0 + 1.0), (-2.0, 1.0)] {
            let qm = action_linear(NetRole::Major.input_dim(n), features::major::ACTION, a, 1.0, 1.0);
            let tm = bellman_target_major(&game, &s, &qm, &ConstantRate(0.03)).unwrap();
            assert!((tm - (rm + best)).abs() < 1e-12, "{tm} vs {}", rm + best);
            let qn = action_linear(NetRole::Minor.input_dim(n), features::minor::ACTION, a, 1.0, 1.0);
            let tn = bellman_target_minor(&game, &s, &qn, &ConstantRate(0.03), &ConstantRate(0.03)).unwrap();
            assert!((tn - (rn + best)).abs() < 1e-12);
        }
    }

    #[test]
    fn continuation_averages_over_the_central_bank() {
        // Q depends on the next central bank rate only: Q = enc(r̃) + 1.
        let game = Game::<f64>::default();
        let s = sample(&game, 2);
        let n = game.grid.len();
        let qm = action_linear(NetRole::Major.input_dim(n), features::major::CB_RATE, 1.0, 1.0, 1.0);
        let expected: f64 = game
            .chain
            .row_at(2)
            .iter()
            .zip(game.chain.rates())
            .map(|(p, r)| p * ((r - 0.025) / 0.01 + 1.0))
            .sum();
        let rm = game.params.gamma.powi(2) * reward_major(s.major, s.major_action, s.cb_rate, &game.params);
        let tm = bellman_target_major(&game, &s, &qm, &HoldRate).unwrap();
        assert!((tm - (rm + expected)).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_networks() {
        let mut tr = Trainer::<f64>::new(Game::default(), TrainConfig { learning_rate: 0.0, ..small(1) }).unwrap();
        let before = tr.live_networks().0.clone();
        let frozen = tr.policies().unwrap();
        tr.inner_step(&frozen).unwrap();
        assert_eq!(tr.live_networks().0, &before);
    }

    #[test]
    fn adam_fits_a_smooth_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = NeuronMeasure::<f64>::random(2, 64, Activation::Relu, &mut rng);
        let mut opt = OptimizerState::for_net(&net, 1e-2);
        let xs: Vec<f64> = (0..64).flat_map(|k| [k as f64 / 63.0, 1.0 - k as f64 / 63.0]).collect();
        let ys: Vec<f64> = xs.chunks(2).map(|x| (3.0 * x[0]).sin() + 0.5 * x[1]).collect();
        let (first, _) = net.loss_and_gradients(&xs, &ys).unwrap();
        let mut last = first;
        for _ in 0..400 {
            let (loss, g) = net.loss_and_gradients(&xs, &ys).unwrap();
            opt.step(&mut net, &g).unwrap();
            last = loss;
        }
        assert!(last < first / 10.0, "{first} -> {last}");
    }

    #[test]
    fn runs_are_deterministic() {
        let run = || {
            let mut tr = Trainer::<f64>::new(Game::default(), small(5)).unwrap();
            tr.run(|_, _| Ok(())).unwrap();
            tr.checkpoint()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_outer_iteration_is_plain_training() {
        let mut tr = Trainer::<f64>::new(Game::default(), TrainConfig { outer_iterations: 1, ..small(2) }).unwrap();
        tr.run(|_, _| Ok(())).unwrap();
        assert_eq!(tr.networks(), tr.live_networks());
    }

    #[test]
    fn exact_concat_is_the_uniform_average_of_fits() {
        let cfg = TrainConfig { averaging: AveragingMode::ExactConcat, outer_iterations: 4, ..small(6) };
        let mut tr = Trainer::<f64>::new(Game::default(), cfg).unwrap();
        let mut fits = Vec::new();
        tr.run(|tr, _| {
            fits.push(tr.live_networks().0.clone());
            Ok(())
        })
        .unwrap();
        let avg = tr.networks().0;
        assert_eq!(avg.width(), 4 * 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let z: Vec<f64> = (0..avg.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mean = fits.iter().map(|q| q.forward(&z).unwrap()).sum::<f64>() / fits.len() as f64;
            assert!((avg.forward(&z).unwrap() - mean).abs() < 1e-8);
        }
    }

    #[test]
    fn checkpoint_resumes_bit_exactly() {
        let game = Game::<f64>::default();
        let mut straight = Trainer::new(game.clone(), small(8)).unwrap();
        straight.run(|_, _| Ok(())).unwrap();

        let mut first = Trainer::new(game.clone(), small(8)).unwrap();
        first.outer_iteration().unwrap();
        let json = first.checkpoint().to_json().unwrap();
        let mut resumed = Trainer::from_checkpoint(game, Checkpoint::from_json(&json).unwrap()).unwrap();
        resumed.run(|_, _| Ok(())).unwrap();
        assert_eq!(resumed.checkpoint(), straight.checkpoint());
    }

    #[test]
    fn full_checkpoint_reads_as_policy() {
        let mut tr = Trainer::<f32>::new(Game::default(), small(3)).unwrap();
        tr.outer_iteration().unwrap();
        let full = tr.checkpoint().to_json().unwrap();
        let policy = PolicyCheckpoint::<f32>::from_json(&full).unwrap();
        assert_eq!(policy, tr.policy_checkpoint());
        assert_eq!(policy.completed_outer, 1);
        let back = PolicyCheckpoint::<f32>::from_json(&policy.to_json().unwrap()).unwrap();
        assert_eq!(back, policy);
    }

    #[test]
    fn checkpoint_rejects_other_scalar() {
        let tr = Trainer::<f32>::new(Game::default(), small(0)).unwrap();
        let json = tr.checkpoint().to_json().unwrap();
        assert!(Checkpoint::<f64>::from_json(&json).is_err());
        assert!(Checkpoint::<f32>::from_json(&json).is_ok());
    }

    #[test]
    fn inner_loop_leaves_frozen_policies_alone() {
        let mut tr = Trainer::<f64>::new(Game::default(), small(11)).unwrap();
        let frozen = tr.policies().unwrap();
        let h = tr.probe_hash(&frozen);
        tr.inner_loop(&frozen).unwrap();
        assert_eq!(tr.probe_hash(&frozen), h);
        assert_eq!(tr.probe_hash(&tr.policies().unwrap()), h);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig { divergence_threshold: 1e-30, ..small(12) };
        let mut tr = Trainer::<f64>::new(Game::default(), cfg).unwrap();
        assert!(matches!(tr.outer_iteration(), Err(Error::Diverged { outer: 0, .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { replay_fraction: 1.5, ..TrainConfig::default() },
            TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
        ] {
            assert!(Trainer::<f64>::new(Game::default(), cfg).is_err());
        }
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"widht": 3}"#);
        assert!(parsed.is_err());
    }
}
