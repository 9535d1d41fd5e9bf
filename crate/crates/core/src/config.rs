//! Experiment configuration files.
//!
//! Configs are TOML with a few top-level keys and one table per stage:
//!
//! ```toml
//! maze = "fourrooms-thin"
//! step = 0.1
//! distance = "euclid"
//! seed = 3
//!
//! [explore]
//! episodes = 1000
//! horizon = 1
//!
//! [build]
//! strategy = "twc+perceptual"
//! tau_a = 5.0
//!
//! [eval]
//! episodes = 100
//! cleanup_steps = 20000
//! ```
//!
//! Unset build and exec fields fall back to defaults that depend on the
//! strategy: `dense` gets `max_dist = 6`, everything else the sparse
//! defaults.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::ExecParams;
use crate::bench::EvalSpec;
use crate::distance::{DistanceFn, DistanceSpec};
use crate::maze::{Maze, ReplayBuffer};
use crate::memory::{Aggregation, BuildParams};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Fixture name or path to a maze text file.
    pub maze: String,
    /// Step length in cells; overrides the maze's own when set.
    pub step: Option<f64>,
    pub distance: String,
    pub seed: u64,
    /// Seeds for multi-seed commands (`ablate`). Empty means `[seed]`.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub explore: ExploreConfig,
    pub build: BuildConfig,
    pub exec: ExecConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreConfig {
    pub episodes: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub strategy: Option<String>,
    pub tau_a: Option<f64>,
    pub tau_p: Option<f64>,
    pub max_dist: Option<f64>,
    pub knn: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecConfig {
    pub acting_cutoff: Option<f64>,
    pub max_steps_per_edge: Option<usize>,
    pub episode_budget: Option<usize>,
    pub goal_radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub bins: usize,
    pub cleanup_steps: usize,
    pub checkpoints: Vec<usize>,
    /// Strategies compared by `ablate`.
    pub strategies: Vec<String>,
    /// Start/goal pairs per threshold for `verify`.
    pub pairs: usize,
    pub tau_grid: Vec<f64>,
    /// Noise level for `verify`; absent means exact distances.
    pub epsilon: Option<f64>,
    pub timing_actions: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            maze: "fourrooms".into(),
            step: None,
            distance: "oracle".into(),
            seed: 0,
            seeds: Vec::new(),
            out: PathBuf::from("out"),
            explore: ExploreConfig::default(),
            build: BuildConfig::default(),
            exec: ExecConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self { episodes: 100, horizon: 100 }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            bins: 3,
            cleanup_steps: 20_000,
            checkpoints: vec![0, 5_000, 10_000, 20_000, 40_000],
            strategies: ["twc+perceptual", "incoming-only", "outgoing-only", "perceptual-only", "uniform:0"]
                .map(String::from)
                .to_vec(),
            pairs: 50,
            tau_grid: vec![0.0, 0.5, 2.0, 5.0],
            epsilon: None,
            timing_actions: 2_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that can be checked without touching the maze.
    pub fn validate(&self) -> Result<()> {
        DistanceSpec::parse(&self.distance)?;
        self.aggregation()?;
        self.build_params()?.validate()?;
        if let Some(step) = self.step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::Config(format!("step must be positive, got {step}")));
            }
        }
        if self.eval.episodes == 0 || self.eval.bins == 0 {
            return Err(Error::Config("eval.episodes and eval.bins must be positive".into()));
        }
        if self.eval.checkpoints.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("eval.checkpoints must be ascending".into()));
        }
        for s in &self.eval.strategies {
            s.parse::<Aggregation>()?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn aggregation(&self) -> Result<Aggregation> {
        match &self.build.strategy {
            Some(s) => s.parse(),
            None => Ok(Aggregation::TwcPerceptual),
        }
    }

    /// Build parameters: explicit fields over the strategy's defaults.
    pub fn build_params(&self) -> Result<BuildParams> {
        let aggregation = self.aggregation()?;
        let base = if aggregation == Aggregation::None { BuildParams::dense() } else { BuildParams::default() };
        let b = &self.build;
        Ok(BuildParams {
            tau_a: b.tau_a.unwrap_or(base.tau_a),
            tau_p: b.tau_p.unwrap_or(base.tau_p),
            max_dist: b.max_dist.unwrap_or(base.max_dist),
            knn: b.knn.unwrap_or(base.knn),
            aggregation,
        })
    }

    /// Execution parameters for a graph built with `p`.
    pub fn exec_params(&self, p: &BuildParams, maze: &Maze) -> Result<ExecParams> {
        let base = ExecParams::for_build(p, maze);
        let e = &self.exec;
        let acting_cutoff = e.acting_cutoff.unwrap_or(base.acting_cutoff);
        let xp = ExecParams {
            acting_cutoff,
            max_steps_per_edge: e.max_steps_per_edge.unwrap_or(base.max_steps_per_edge),
            episode_budget: e.episode_budget.unwrap_or(base.episode_budget),
            goal_radius: e.goal_radius.unwrap_or(maze.max_step() * acting_cutoff),
        };
        xp.validate()?;
        Ok(xp)
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec { episodes: self.eval.episodes, bins: self.eval.bins }
    }

    pub fn load_maze(&self) -> Result<Arc<Maze>> {
        let maze = Maze::load(&self.maze)?;
        Ok(Arc::new(match self.step {
            Some(step) => maze.with_max_step(step)?,
            None => maze,
        }))
    }

    pub fn load_distance(&self, maze: &Arc<Maze>, buffer: Option<&ReplayBuffer>) -> Result<DistanceFn> {
        DistanceSpec::parse(&self.distance)?.build(maze, buffer)
    }

    /// Applies `key=value` overrides using dotted keys, e.g. `build.tau_a=3`.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value: toml::Value = match toml::from_str::<BTreeMap<String, toml::Value>>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let mut table = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for part in &parts[..parts.len() - 1] {
                table = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{part}` is not a section")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), value);
        }
        Self::from_toml(&toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?)
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
