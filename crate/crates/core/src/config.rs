//! Run configuration files (TOML).
//!
//! ```toml
//! seed = 7                      # required
//! budget = 150
//! batch_size = 4
//! artifact_dir = "runs/demo"
//! space = "miniature"           # builtin name or path to a space file
//! metric = "auc_roc"
//! folds = 5
//!
//! [backend]
//! kind = "synthetic"            # or "external"
//! benchmark_seed = 0
//! noise_sd = 0.005
//! # command = ["python3", "worker.py", "--data", "data/"]
//! # workers = 4
//!
//! [structure]
//! m = 5
//! gamma = 1.0
//!
//! [metalearn]                   # optional warm start
//! repository = "repo"
//! dataset = "data/train.csv"
//! target = "label"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bo::{AcquisitionConfig, RunOptions, StructureSettings};
use crate::ensemble::EnsembleSettings;
use crate::error::{Error, Result};
use crate::metalearn::WeightingMode;
use crate::metrics::Metric;
use crate::space::SearchSpace;
use crate::structure::StructurePrior;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub budget: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub artifact_dir: PathBuf,
    #[serde(default = "default_space")]
    pub space: String,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Dataset name passed to the evaluator.
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub max_seconds: Option<f64>,
    #[serde(default = "default_time_budget")]
    pub time_budget_s: f64,
    #[serde(default)]
    pub failure_penalty: f64,
    #[serde(default)]
    pub heteroscedastic: bool,
    #[serde(default)]
    pub initial_design: Option<usize>,
    pub backend: Backend,
    #[serde(default)]
    pub structure: StructureConfig,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default)]
    pub metalearn: Option<MetaConfig>,
    #[serde(default)]
    pub ensemble: EnsembleSettings,
}

fn default_batch_size() -> usize {
    4
}

fn default_space() -> String {
    "miniature".into()
}

fn default_metric() -> Metric {
    Metric::AucRoc
}

fn default_folds() -> usize {
    5
}

fn default_time_budget() -> f64 {
    3600.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Backend {
    Synthetic {
        #[serde(default)]
        benchmark_seed: u64,
        #[serde(default = "default_noise")]
        noise_sd: f64,
    },
    External {
        command: Vec<String>,
        #[serde(default = "default_workers")]
        workers: usize,
    },
}

fn default_noise() -> f64 {
    0.005
}

fn default_workers() -> usize {
    4
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureConfig {
    /// Number of subspaces; `#stages + 2` when absent.
    pub m: Option<usize>,
    /// Symmetric Dirichlet concentration; 1 when absent.
    pub gamma: Option<f64>,
    pub learn: Option<bool>,
    pub sweeps_per_iteration: Option<usize>,
    pub split_merge_moves: Option<usize>,
    pub pool_capacity: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub repository: PathBuf,
    pub dataset: PathBuf,
    pub target: String,
    #[serde(default)]
    pub event: Option<String>,
    #[serde(default)]
    pub mode: WeightingMode,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        config.resolve(path.parent().unwrap_or(Path::new(".")));
        config.validate()?;
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        self.artifact_dir = join(&self.artifact_dir);
        if !is_builtin_space(&self.space) {
            self.space = join(Path::new(&self.space)).to_string_lossy().into_owned();
        }
        if let Some(m) = &mut self.metalearn {
            m.repository = join(&m.repository);
            m.dataset = join(&m.dataset);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidConfig("budget: must be at least 1".into()));
        }
        if !is_builtin_space(&self.space) && !Path::new(&self.space).exists() {
            return Err(Error::InvalidConfig(format!("space: file '{}' does not exist", self.space)));
        }
        match &self.backend {
            Backend::Synthetic { noise_sd, .. } => {
                if self.space != "miniature" {
                    return Err(Error::InvalidConfig(
                        "space: the synthetic backend runs on the miniature space".into(),
                    ));
                }
                if !(*noise_sd >= 0.0 && noise_sd.is_finite()) {
                    return Err(Error::InvalidConfig("backend.noise_sd: must be finite and nonnegative".into()));
                }
            }
            Backend::External { command, workers } => {
                if command.is_empty() {
                    return Err(Error::InvalidConfig("backend.command: must name a program".into()));
                }
                if *workers == 0 {
                    return Err(Error::InvalidConfig("backend.workers: must be at least 1".into()));
                }
            }
        }
        if let Some(m) = &self.metalearn {
            if !m.repository.is_dir() {
                return Err(Error::InvalidConfig(format!(
                    "metalearn.repository: '{}' is not a directory",
                    m.repository.display()
                )));
            }
            if !m.dataset.exists() {
                return Err(Error::InvalidConfig(format!(
                    "metalearn.dataset: '{}' does not exist",
                    m.dataset.display()
                )));
            }
        }
        if let Some(m) = self.structure.m {
            if m == 0 {
                return Err(Error::InvalidConfig("structure.m: must be at least 1".into()));
            }
        }
        if let Some(g) = self.structure.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::InvalidConfig("structure.gamma: must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn load_space(&self) -> Result<SearchSpace> {
        match self.space.as_str() {
            "miniature" => Ok(SearchSpace::miniature()),
            "reference" => Ok(SearchSpace::reference()),
            path => SearchSpace::load(path),
        }
    }

    /// Optimizer options (without any warm start).
    pub fn options(&self, space: &SearchSpace) -> Result<RunOptions> {
        let mut structure = StructureSettings::default();
        if self.structure.m.is_some() || self.structure.gamma.is_some() {
            let m = self.structure.m.unwrap_or(space.n_stages() + 2);
            structure.prior = Some(StructurePrior::symmetric(m, self.structure.gamma.unwrap_or(1.0))?);
        }
        let o = &self.structure;
        structure.learn = o.learn.unwrap_or(structure.learn);
        structure.sweeps_per_iteration = o.sweeps_per_iteration.unwrap_or(structure.sweeps_per_iteration);
        structure.split_merge_moves = o.split_merge_moves.unwrap_or(structure.split_merge_moves);
        structure.pool_capacity = o.pool_capacity.unwrap_or(structure.pool_capacity);
        let options = RunOptions {
            max_evaluations: self.budget,
            max_seconds: self.max_seconds,
            acquisition: AcquisitionConfig { batch_size: self.batch_size, ..self.acquisition.clone() },
            structure,
            metric: self.metric,
            folds: self.folds,
            dataset: self.dataset.clone(),
            time_budget_s: self.time_budget_s,
            failure_penalty: self.failure_penalty,
            heteroscedastic: self.heteroscedastic,
            initial_design: self.initial_design,
            seed: self.seed,
            warmstart: None,
        };
        options.validate(space)?;
        Ok(options)
    }
}

fn is_builtin_space(s: &str) -> bool {
    matches!(s, "miniature" | "reference")
}
