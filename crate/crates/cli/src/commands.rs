use std::path::Path;

use anyhow::{bail, Context, Result};
use bankmfg::evaluation::{
    best_response_major, best_response_minor, initial_representatives, value_estimate, MajorGap, MinorGap,
    Rollout, RolloutMode, Trajectory, ValueEstimate,
};
use bankmfg::market::Atom;
use bankmfg::measure::{aggregate_minor_mass, project, EmpiricalMeasure, GridSpec, ProjectedMeasure};
use bankmfg::trainer::{Checkpoint, Frozen, PolicyCheckpoint, Trainer};
use bankmfg::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::Run;
use crate::config::{RunConfig, ScalarKind, Stream};

pub const LOSSES: &str = "losses.csv";
pub const STATE: &str = "state.json";
pub const TRAJECTORIES: &str = "trajectories.csv";
pub const MINORS: &str = "minors.csv";
pub const MEASURES: &str = "measures.csv";
pub const SUMMARY: &str = "summary.json";
pub const REPORT: &str = "report.json";
pub const PROJECTED: &str = "projected.json";

pub fn policy_file(completed: usize) -> String {
    format!("checkpoints/policy_{completed:03}.json")
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn train(config: &RunConfig, run: &mut Run, resume: Option<&Path>) -> Result<()> {
    match config.scalar {
        ScalarKind::F32 => train_as::<f32>(config, run, resume),
        ScalarKind::F64 => train_as::<f64>(config, run, resume),
    }
}

fn train_as<T: Scalar>(config: &RunConfig, run: &mut Run, resume: Option<&Path>) -> Result<()> {
    let game = config.game::<T>()?;
    let mut trainer = match resume {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let ckpt = Checkpoint::<T>::from_json(&text).with_context(|| format!("loading {}", path.display()))?;
            let mut expected = config.train.clone();
            expected.outer_iterations = ckpt.config.outer_iterations;
            if ckpt.config != expected {
                bail!(
                    "{} was trained with different [train] settings than the configuration",
                    path.display()
                );
            }
            let mut ckpt = ckpt;
            ckpt.config.outer_iterations = config.train.outer_iterations;
            Trainer::from_checkpoint(game, ckpt)?
        }
        None => Trainer::new(game, config.train.clone())?,
    };
    run.write("config.toml", config.to_toml()?.as_bytes())?;
    let kept = if resume.is_some() { completed_loss_rows(&run.path(LOSSES), trainer.completed())? } else { Vec::new() };
    let mut losses = csv::Writer::from_path(run.path(LOSSES))?;
    losses.write_record(["outer_n", "inner_m", "loss_major", "loss_minor", "wall_ms"])?;
    for row in &kept {
        losses.write_record(row)?;
    }
    losses.flush()?;
    run.record(LOSSES);
    for n in 1..=trainer.completed() {
        if run.path(&policy_file(n)).exists() {
            run.record(&policy_file(n));
        }
    }
    let mut files = Vec::new();
    trainer.run(|tr, report| {
        let mut io = || -> Result<()> {
            for r in &report.records {
                losses.write_record([
                    r.outer.to_string(),
                    r.inner.to_string(),
                    r.loss_major.to_string(),
                    r.loss_minor.to_string(),
                    r.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default(),
                ])?;
            }
            losses.flush()?;
            let name = policy_file(tr.completed());
            crate::artifacts::write_atomic(&run.path(&name), tr.policy_checkpoint().to_json()?.as_bytes())?;
            crate::artifacts::write_atomic(&run.path(STATE), tr.checkpoint().to_json()?.as_bytes())?;
            files.push(name);
            Ok(())
        };
        io().map_err(|e| bankmfg::Error::Internal(format!("{e:#}")))
    })?;
    for f in &files {
        run.record(f);
    }
    run.record(STATE);
    log::info!("trained {} outer iterations into {}", trainer.completed(), run.dir().display());
    Ok(())
}

/// Rows of an earlier loss file that belong to iterations already in the
/// resumed state.
fn completed_loss_rows(path: &Path, completed: usize) -> Result<Vec<csv::StringRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for rec in csv::Reader::from_path(path)?.records() {
        let rec = rec?;
        let outer: usize = rec.get(0).unwrap_or_default().parse().with_context(|| format!("{}: bad outer_n", path.display()))?;
        if outer < completed {
            rows.push(rec);
        }
    }
    Ok(rows)
}

#[derive(Deserialize)]
struct ScalarTag {
    scalar: String,
}

/// Reads a policy or full checkpoint, in whichever scalar it was stored, as
/// f64 networks.
pub fn load_policy(path: &Path) -> Result<PolicyCheckpoint<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let tag: ScalarTag = serde_json::from_str(&text).with_context(|| format!("{}: not a checkpoint", path.display()))?;
    let policy = match tag.scalar.as_str() {
        "f32" => PolicyCheckpoint::<f32>::from_json(&text)?.cast(),
        "f64" => PolicyCheckpoint::<f64>::from_json(&text)?,
        other => bail!("{}: unknown scalar {other}", path.display()),
    };
    Ok(policy)
}

fn policies(config: &RunConfig, checkpoint: &Path) -> Result<(bankmfg::game::Game<f64>, Frozen<f64>, usize)> {
    let game = config.game::<f64>()?;
    let policy = load_policy(checkpoint)?;
    let frozen = Frozen::new(&game, &policy.major, &policy.minor)
        .with_context(|| format!("{} does not fit the configured game", checkpoint.display()))?;
    Ok((game, frozen, policy.completed_outer))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub completed_outer: usize,
    pub mode: RolloutMode,
    pub values: ValueEstimate<f64>,
    pub max_mass_defect: f64,
    pub floor_rate: f64,
}

pub fn rollout(config: &RunConfig, run: &mut Run, checkpoint: &Path, mode: RolloutMode) -> Result<()> {
    let (game, frozen, completed) = policies(config, checkpoint)?;
    let (reps, weights) = initial_representatives(&game);
    let mut rng = stream_rng(config.seed, Stream::Rollout);
    let paths = Rollout::new(&game, &frozen.major, &frozen.minor)
        .tracking(reps.clone())
        .run(mode, config.evaluation.rollout_paths, &mut rng)?;
    run.write(TRAJECTORIES, &trajectories_csv(&game.grid, &paths)?)?;
    run.write(MINORS, &minors_csv(&paths)?)?;
    run.write(MEASURES, &measures_csv(&game.grid, &paths)?)?;
    let summary = RolloutSummary {
        completed_outer: completed,
        mode,
        values: value_estimate(&paths, &weights, game.params.gamma, mode),
        max_mass_defect: paths.iter().map(|p| p.max_mass_defect(&game)).fold(0.0, f64::max),
        floor_rate: game.params.rate_min,
    };
    run.write(SUMMARY, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(())
}

fn trajectories_csv(grid: &GridSpec<f64>, paths: &[Trajectory<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "path",
        "probability",
        "t",
        "cb_rate",
        "major_p",
        "major_r",
        "major_u",
        "major_reward",
        "minor_mass",
        "minor_mean_rate",
    ])?;
    for (k, tr) in paths.iter().enumerate() {
        for s in &tr.steps {
            let mu = ProjectedMeasure::new(s.measure.clone())?;
            w.write_record([
                k.to_string(),
                tr.probability.to_string(),
                s.t.to_string(),
                s.cb_rate.to_string(),
                s.major_p.to_string(),
                s.major_r.to_string(),
                s.major_u.to_string(),
                s.reward_major.to_string(),
                aggregate_minor_mass(&mu, grid).to_string(),
                mu.mean_rate(grid).to_string(),
            ])?;
        }
    }
    Ok(w.into_inner()?)
}

fn minors_csv(paths: &[Trajectory<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["path", "minor", "t", "p", "r", "u", "reward"])?;
    for (k, tr) in paths.iter().enumerate() {
        for s in &tr.steps {
            for (i, m) in s.minors.iter().enumerate() {
                w.write_record([
                    k.to_string(),
                    i.to_string(),
                    s.t.to_string(),
                    m.p.to_string(),
                    m.r.to_string(),
                    m.u.to_string(),
                    m.reward.to_string(),
                ])?;
            }
        }
    }
    Ok(w.into_inner()?)
}

fn measures_csv(grid: &GridSpec<f64>, paths: &[Trajectory<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["path", "t", "node", "p", "r", "weight"])?;
    for (k, tr) in paths.iter().enumerate() {
        for s in &tr.steps {
            for (n, &wt) in s.measure.iter().enumerate() {
                if wt > 0.0 {
                    let x = grid.node(n);
                    w.write_record([
                        k.to_string(),
                        s.t.to_string(),
                        n.to_string(),
                        x.p.to_string(),
                        x.r.to_string(),
                        wt.to_string(),
                    ])?;
                }
            }
        }
    }
    Ok(w.into_inner()?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub completed_outer: usize,
    pub major: MajorGap<f64>,
    pub minor: MinorGap<f64>,
}

pub fn evaluate(config: &RunConfig, run: &mut Run, checkpoint: &Path) -> Result<()> {
    let (game, frozen, completed) = policies(config, checkpoint)?;
    let e = &config.evaluation;
    let (reps, weights) = initial_representatives(&game);
    let minor = best_response_minor(&game, &frozen.major, &frozen.minor, &reps, &weights, e.p_points)?;
    let major = best_response_major(&game, &frozen.major, &frozen.minor, e.major_horizon, e.tree_budget as u128)?;
    let report = EvaluationReport {
        completed_outer: completed,
        major,
        minor,
    };
    run.write(REPORT, serde_json::to_string_pretty(&report)?.as_bytes())?;
    log::info!(
        "minor gap {:.3e} ({:.2}% of on-policy), major gap {:.3e} over {} steps",
        minor.gap,
        100.0 * minor.relative_gap,
        major.gap,
        major.horizon
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasureFile {
    pub atoms: Vec<Atom<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Moments {
    pub mass: f64,
    pub mean_p: f64,
    pub mean_r: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectionOutput {
    pub grid: GridSpec<f64>,
    pub atoms: Vec<Atom<f64>>,
    pub weights: Vec<f64>,
    pub input: Moments,
    pub output: Moments,
}

fn random_atoms(grid: &GridSpec<f64>, rng: &mut ChaCha8Rng) -> Vec<Atom<f64>> {
    let (plo, phi) = grid.p_bounds();
    let (rlo, rhi) = grid.r_bounds();
    let raw: Vec<Atom<f64>> = (0..12)
        .map(|_| Atom::new(rng.gen_range(plo..=phi), rng.gen_range(rlo..=rhi), rng.gen_range(0.05..1.0)))
        .collect();
    let total: f64 = raw.iter().map(|a| a.w).sum();
    raw.into_iter().map(|a| Atom::new(a.p, a.r, a.w / total)).collect()
}

pub fn project_demo(config: &RunConfig, run: &mut Run, input: Option<&Path>) -> Result<()> {
    let game = config.game::<f64>()?;
    let atoms = match input {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<MeasureFile>(&text)
                .with_context(|| format!("{}: expected {{\"atoms\": [{{\"p\", \"r\", \"w\"}}]}}", path.display()))?
                .atoms
        }
        None => random_atoms(&game.grid, &mut stream_rng(config.seed, Stream::Demo)),
    };
    let mu = EmpiricalMeasure::new(atoms.clone())?;
    let projected = project(&mu, &game.grid)?;
    let input = Moments {
        mass: atoms.iter().map(|a| a.w).sum(),
        mean_p: atoms.iter().map(|a| a.w * a.p).sum(),
        mean_r: atoms.iter().map(|a| a.w * a.r).sum(),
    };
    let output = Moments {
        mass: projected.total(),
        mean_p: aggregate_minor_mass(&projected, &game.grid),
        mean_r: projected.mean_rate(&game.grid),
    };
    let out = ProjectionOutput {
        grid: game.grid.clone(),
        atoms,
        weights: projected.weights().to_vec(),
        input,
        output,
    };
    run.write(PROJECTED, serde_json::to_string_pretty(&out)?.as_bytes())?;
    Ok(())
}
