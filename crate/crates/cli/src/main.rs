mod artifacts;
mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use bankmfg::evaluation::RolloutMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::artifacts::Run;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "bankmfg", version, about = "Deposit-rate competition as a major-minor mean-field game")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults to the shipped default profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to the configured `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sampled,
    FullTree,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the Q-networks by fictitious play; writes one policy checkpoint
    /// per outer iteration and the loss history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from a full training state (`state.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Simulate the learned policies from the configured initial condition.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Central bank paths: sampled, or every path with its probability.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Exploitability of the learned policies.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Project a finite-support measure onto the grid.
    ProjectDemo {
        #[command(flatten)]
        common: Common,
        /// JSON file `{"atoms": [{"p": .., "r": .., "w": ..}, ..]}`; random
        /// atoms when omitted.
        measure: Option<PathBuf>,
    },
}

fn resolve(common: &Common, sub: &str) -> Result<(RunConfig, PathBuf)> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default_profile(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    let out = match &common.out {
        Some(o) => o.clone(),
        None if sub == "train" => config.output_dir.clone(),
        None => config.output_dir.join(sub),
    };
    Ok((config, out))
}

fn execute(
    name: &str,
    common: &Common,
    checkpoint: Option<&Path>,
    body: impl FnOnce(&RunConfig, &mut Run) -> Result<()>,
) -> Result<()> {
    let (config, out) = resolve(common, name)?;
    let mut run = Run::start(name, &out, &config, checkpoint)?;
    let outcome = body(&config, &mut run);
    run.finish(&outcome)?;
    outcome
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common, checkpoint } => execute("train", common, checkpoint.as_deref(), |c, r| {
            commands::train(c, r, checkpoint.as_deref())
        }),
        Command::Rollout {
            common,
            checkpoint,
            mode,
        } => execute("rollout", common, Some(checkpoint), |c, r| {
            let mode = match mode {
                Some(ModeArg::Sampled) => RolloutMode::Sampled,
                Some(ModeArg::FullTree) => RolloutMode::FullTree,
                None => c.evaluation.rollout_mode,
            };
            commands::rollout(c, r, checkpoint, mode)
        }),
        Command::Evaluate { common, checkpoint } => {
            execute("evaluate", common, Some(checkpoint), |c, r| commands::evaluate(c, r, checkpoint))
        }
        Command::ProjectDemo { common, measure } => {
            execute("project-demo", common, None, |c, r| commands::project_demo(c, r, measure.as_deref()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
