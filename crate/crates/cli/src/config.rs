//! Run configuration loaded from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bankmfg::evaluation::RolloutMode;
use bankmfg::game::{Game, InitialState};
use bankmfg::market::{linspace, ActionGrid, BankState, CentralBankChain, MarketParams};
use bankmfg::measure::{GridSpec, ProjectedMeasure};
use bankmfg::trainer::TrainConfig;
use bankmfg::Scalar;
use serde::{Deserialize, Serialize};

/// The configuration shipped as the default profile.
pub const DEFAULT_PROFILE: &str = include_str!("../../../configs/default.toml");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarKind {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub p_nodes: usize,
    pub r_nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub rates: Vec<f64>,
    /// Jump intensity; ignored when `transition` is given.
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub major_p: f64,
    pub major_r: f64,
    pub cb_rate: f64,
    /// Minors are spread uniformly over this box.
    pub minor_p: [f64; 2],
    pub minor_r: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Proportion grid size for the minor best response.
    pub p_points: usize,
    /// Look-ahead of the major best-response tree search.
    pub major_horizon: usize,
    /// Largest admissible tree size.
    pub tree_budget: u64,
    pub rollout_mode: RolloutMode,
    /// Sampled central bank paths per rollout.
    pub rollout_paths: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every subsystem derives its stream from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scalar: ScalarKind,
    pub market: MarketParams<f64>,
    pub grid: GridConfig,
    pub actions: usize,
    pub chain: ChainConfig,
    pub initial: InitialConfig,
    pub train: TrainConfig,
    pub evaluation: EvaluationConfig,
}

/// Per-subsystem stream of the root seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Rollout = 2,
    Demo = 3,
}

impl RunConfig {
    pub fn default_profile() -> Self {
        Self::parse(DEFAULT_PROFILE, Path::new("<default profile>")).expect("shipped profile is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).with_context(|| format!("{}: invalid TOML", origin.display()))?;
        if raw
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("seed"))
        {
            bail!("{}: `train.seed` is not allowed; set the root `seed`", origin.display());
        }
        let mut cfg: Self = toml::from_str(text).with_context(|| format!("{}: invalid configuration", origin.display()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate().with_context(|| format!("{}: invalid configuration", origin.display()))?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().context("[train]")?;
        self.game::<f64>().context("[market]/[grid]/[chain]/[initial]")?;
        let e = &self.evaluation;
        if e.p_points < 2 {
            bail!("evaluation.p_points: need at least 2");
        }
        if e.major_horizon == 0 || e.major_horizon > self.market.horizon {
            bail!("evaluation.major_horizon: must lie in 1..={}", self.market.horizon);
        }
        if e.rollout_paths == 0 {
            bail!("evaluation.rollout_paths: must be >= 1");
        }
        Ok(())
    }

    pub fn game<T: Scalar>(&self) -> Result<Game<T>> {
        let params: MarketParams<T> = self.market.cast();
        let g = &self.grid;
        if g.p_nodes < 2 || g.r_nodes < 2 {
            bail!("grid: need at least 2 nodes per axis");
        }
        let grid = GridSpec::new(
            linspace(params.prop_min, params.prop_max, g.p_nodes),
            linspace(params.rate_min, params.rate_max, g.r_nodes),
        )?;
        let rates: Vec<T> = self.chain.rates.iter().map(|&r| T::lit(r)).collect();
        let chain = match &self.chain.transition {
            Some(m) => CentralBankChain::from_matrix(
                rates,
                m.iter().map(|row| row.iter().map(|&x| T::lit(x)).collect()).collect(),
            )?,
            None => CentralBankChain::jump_chain(rates, T::lit(self.chain.lambda), params.dt)?,
        };
        if self.actions < 2 {
            bail!("actions: need at least 2 rates");
        }
        let actions = ActionGrid::uniform(params.rate_min, params.rate_max, self.actions)?;
        let i = &self.initial;
        let measure = ProjectedMeasure::uniform_box(
            &grid,
            (T::lit(i.minor_p[0]), T::lit(i.minor_p[1])),
            (T::lit(i.minor_r[0]), T::lit(i.minor_r[1])),
        )?;
        let game = Game {
            params,
            grid,
            chain,
            actions,
            initial: InitialState {
                major: BankState::new(T::lit(i.major_p), T::lit(i.major_r)),
                measure,
                cb_rate: T::lit(i.cb_rate),
            },
        };
        game.validate()?;
        Ok(game)
    }

    /// Echo that loads back into the same configuration.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(self)?;
        if let Some(train) = table.get_mut("train").and_then(|t| t.as_table_mut()) {
            train.remove("seed");
        }
        Ok(toml::to_string(&table)?)
    }
}
