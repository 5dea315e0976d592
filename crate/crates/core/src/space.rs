//! Conditional pipeline search spaces.
//!
//! A space is an ordered list of stages, each offering a set of algorithms,
//! each algorithm carrying its own hyperparameters. A hyperparameter only
//! matters when its algorithm is the one chosen for its stage.
//!
//! Points are encoded as fixed-length vectors: one categorical dimension per
//! stage (the index of the chosen algorithm, in declaration order), followed
//! by every hyperparameter of every algorithm, stage by stage. Numeric
//! hyperparameters are normalized to `[0, 1]` (in log space when
//! `log_scale`), categorical ones hold the category index. Dimensions of
//! algorithms that are not chosen hold the normalized default and are
//! marked inactive.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Imputation,
    FeatureProcessing,
    Prediction,
    Calibration,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Imputation, Stage::FeatureProcessing, Stage::Prediction, Stage::Calibration];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Imputation => "imputation",
            Stage::FeatureProcessing => "feature_processing",
            Stage::Prediction => "prediction",
            Stage::Calibration => "calibration",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A hyperparameter value as it appears in configurations and on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
    Cat(String),
}

impl ParamValue {
    fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Real(v) => Some(*v),
            ParamValue::Cat(_) => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Real(v) => write!(f, "{v}"),
            ParamValue::Cat(v) => f.write_str(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamKind {
    Continuous { lo: f64, hi: f64, log_scale: bool },
    Integer { lo: i64, hi: i64 },
    Categorical { choices: Vec<String> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperparamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub default: ParamValue,
}

impl HyperparamSpec {
    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ParamKind::Categorical { .. })
    }

    /// Checks `value` against the bounds and returns it in canonical form
    /// (integers as `Int`, reals as `Real`).
    pub fn check(&self, value: &ParamValue) -> Result<ParamValue> {
        let bad = || Error::InvalidConfig(format!("value {value} is not valid for hyperparameter '{}'", self.name));
        match &self.kind {
            ParamKind::Continuous { lo, hi, .. } => {
                let v = value.as_f64().ok_or_else(bad)?;
                if !v.is_finite() || v < *lo || v > *hi {
                    return Err(bad());
                }
                Ok(ParamValue::Real(v))
            }
            ParamKind::Integer { lo, hi } => {
                let v = match value {
                    ParamValue::Int(v) => *v,
                    ParamValue::Real(v) if v.fract() == 0.0 && v.is_finite() => *v as i64,
                    _ => return Err(bad()),
                };
                if v < *lo || v > *hi {
                    return Err(bad());
                }
                Ok(ParamValue::Int(v))
            }
            ParamKind::Categorical { choices } => match value {
                ParamValue::Cat(c) if choices.contains(c) => Ok(value.clone()),
                _ => Err(bad()),
            },
        }
    }

    /// Maps a valid value onto its encoded coordinate.
    pub fn normalize(&self, value: &ParamValue) -> f64 {
        match &self.kind {
            ParamKind::Continuous { lo, hi, log_scale } => {
                let v = value.as_f64().unwrap_or(*lo);
                if *log_scale {
                    (v.ln() - lo.ln()) / (hi.ln() - lo.ln())
                } else {
                    (v - lo) / (hi - lo)
                }
            }
            ParamKind::Integer { lo, hi } => {
                let v = value.as_f64().unwrap_or(*lo as f64);
                (v - *lo as f64) / (*hi - *lo) as f64
            }
            ParamKind::Categorical { choices } => match value {
                ParamValue::Cat(c) => choices.iter().position(|x| x == c).unwrap_or(0) as f64,
                _ => 0.0,
            },
        }
    }

    /// Inverse of [`normalize`](Self::normalize). Integers round half-up,
    /// out-of-range coordinates are clamped.
    pub fn denormalize(&self, u: f64) -> ParamValue {
        match &self.kind {
            ParamKind::Continuous { lo, hi, log_scale } => {
                let u = u.clamp(0.0, 1.0);
                let v = if *log_scale { (lo.ln() + u * (hi.ln() - lo.ln())).exp() } else { lo + u * (hi - lo) };
                ParamValue::Real(v.clamp(*lo, *hi))
            }
            ParamKind::Integer { lo, hi } => {
                let span = (*hi - *lo) as f64;
                let steps = (u.clamp(0.0, 1.0) * span + 0.5).floor() as i64;
                ParamValue::Int((*lo + steps).clamp(*lo, *hi))
            }
            ParamKind::Categorical { choices } => {
                let idx = (u + 0.5).floor().clamp(0.0, (choices.len() - 1) as f64) as usize;
                ParamValue::Cat(choices[idx].clone())
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> ParamValue {
        match &self.kind {
            ParamKind::Continuous { lo, hi, log_scale } => {
                let v =
                    if *log_scale { rng.random_range(lo.ln()..=hi.ln()).exp() } else { rng.random_range(*lo..=*hi) };
                ParamValue::Real(v.clamp(*lo, *hi))
            }
            ParamKind::Integer { lo, hi } => ParamValue::Int(rng.random_range(*lo..=*hi)),
            ParamKind::Categorical { choices } => ParamValue::Cat(choices[rng.random_range(0..choices.len())].clone()),
        }
    }

    /// Number of distinct values, when finite.
    pub fn cardinality(&self) -> Option<u64> {
        match &self.kind {
            ParamKind::Continuous { .. } => None,
            ParamKind::Integer { lo, hi } => Some((hi - lo) as u64 + 1),
            ParamKind::Categorical { choices } => Some(choices.len() as u64),
        }
    }

    /// All values of a finite hyperparameter, in order.
    pub fn values(&self) -> Option<Vec<ParamValue>> {
        match &self.kind {
            ParamKind::Continuous { .. } => None,
            ParamKind::Integer { lo, hi } => Some((*lo..=*hi).map(ParamValue::Int).collect()),
            ParamKind::Categorical { choices } => Some(choices.iter().cloned().map(ParamValue::Cat).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgorithmSpec {
    pub name: String,
    pub stage: Stage,
    pub hyperparams: Vec<HyperparamSpec>,
}

impl AlgorithmSpec {
    pub fn hyperparam(&self, name: &str) -> Option<&HyperparamSpec> {
        self.hyperparams.iter().find(|h| h.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub stage: Stage,
    pub algorithms: Vec<AlgorithmSpec>,
}

/// Location of one algorithm in the flat algorithm list and the encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlgorithmRef {
    pub stage_index: usize,
    pub index_in_stage: usize,
    pub first_dim: usize,
    pub n_dims: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DimInfo {
    /// Global algorithm index, or `None` for a stage-choice dimension.
    pub algorithm: Option<usize>,
    pub categorical: bool,
}

/// A validated search space with its precomputed encoding layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceDefinition", into = "SpaceDefinition")]
pub struct SearchSpace {
    stages: Vec<StageSpec>,
    algorithms: Vec<AlgorithmRef>,
    stage_offsets: Vec<usize>,
    dims: Vec<DimInfo>,
}

/// One point of the space: an algorithm per stage plus values for exactly
/// the hyperparameters of the chosen algorithms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stages: Vec<StageChoice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageChoice {
    pub stage: Stage,
    pub algorithm: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
}

impl PipelineConfig {
    pub fn algorithm(&self, stage: Stage) -> Option<&str> {
        self.stages.iter().find(|c| c.stage == stage).map(|c| c.algorithm.as_str())
    }

    /// Compact one-line rendering, e.g. `mice | pca(whiten=true) | knn(n_neighbors=5) | none`.
    pub fn label(&self) -> String {
        self.stages
            .iter()
            .map(|c| {
                if c.params.is_empty() {
                    c.algorithm.clone()
                } else {
                    let params: Vec<String> = c.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    format!("{}({})", c.algorithm, params.join(","))
                }
            })
            .collect::<Vec<_>>()
            .join(" | ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPoint {
    pub values: Vec<f64>,
    pub active: Vec<bool>,
}

impl SearchSpace {
    pub fn new(stages: Vec<StageSpec>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidSpace("space has no stages".into()));
        }
        let mut seen_stages = HashSet::new();
        // Names of algorithms with hyperparameters double as wire-protocol
        // keys, so they must be unique across stages.
        let mut keyed_names: HashSet<&str> = HashSet::new();
        for s in &stages {
            if !seen_stages.insert(s.stage) {
                return Err(Error::InvalidSpace(format!("stage '{}' declared twice", s.stage)));
            }
            if s.algorithms.is_empty() {
                return Err(Error::InvalidSpace(format!("stage '{}' has no algorithms", s.stage)));
            }
            let mut names = HashSet::new();
            for a in &s.algorithms {
                if a.stage != s.stage {
                    return Err(Error::InvalidSpace(format!(
                        "algorithm '{}' is tagged with stage '{}' but listed under '{}'",
                        a.name, a.stage, s.stage
                    )));
                }
                if a.name.is_empty() {
                    return Err(Error::InvalidSpace(format!("empty algorithm name in stage '{}'", s.stage)));
                }
                if !names.insert(a.name.as_str()) {
                    return Err(Error::InvalidSpace(format!(
                        "duplicate algorithm '{}' in stage '{}'",
                        a.name, s.stage
                    )));
                }
                if !a.hyperparams.is_empty() && !keyed_names.insert(a.name.as_str()) {
                    return Err(Error::InvalidSpace(format!(
                        "algorithm name '{}' with hyperparameters appears in more than one stage",
                        a.name
                    )));
                }
                let mut hp_names = HashSet::new();
                for h in &a.hyperparams {
                    if !hp_names.insert(h.name.as_str()) {
                        return Err(Error::InvalidSpace(format!(
                            "duplicate hyperparameter '{}' in algorithm '{}'",
                            h.name, a.name
                        )));
                    }
                    validate_hyperparam(h).map_err(|msg| {
                        Error::InvalidSpace(format!("algorithm '{}', hyperparameter '{}': {msg}", a.name, h.name))
                    })?;
                }
            }
        }

        let mut algorithms = Vec::new();
        let mut stage_offsets = Vec::new();
        let mut dims: Vec<DimInfo> =
            (0..stages.len()).map(|_| DimInfo { algorithm: None, categorical: true }).collect();
        for (si, s) in stages.iter().enumerate() {
            stage_offsets.push(algorithms.len());
            for (ai, a) in s.algorithms.iter().enumerate() {
                let global = algorithms.len();
                algorithms.push(AlgorithmRef {
                    stage_index: si,
                    index_in_stage: ai,
                    first_dim: dims.len(),
                    n_dims: a.hyperparams.len(),
                });
                for h in &a.hyperparams {
                    dims.push(DimInfo { algorithm: Some(global), categorical: h.is_categorical() });
                }
            }
        }
        Ok(SearchSpace { stages, algorithms, stage_offsets, dims })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let def: SpaceDefinition = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::try_from(def)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The bundled reference space (41 algorithms over four stages).
    pub fn reference() -> Self {
        Self::from_toml(REFERENCE_SPACE).expect("bundled reference space is valid")
    }

    /// The bundled three-stage space with 10 algorithms.
    pub fn miniature() -> Self {
        Self::from_toml(MINIATURE_SPACE).expect("bundled miniature space is valid")
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Total number of algorithms across all stages.
    pub fn n_algorithms(&self) -> usize {
        self.algorithms.len()
    }

    /// Encoded dimension: one per stage plus one per hyperparameter.
    pub fn dimension(&self) -> usize {
        self.dims.len()
    }

    pub fn n_hyperparams(&self) -> usize {
        self.dims.len() - self.stages.len()
    }

    pub fn pipeline_count(&self) -> u128 {
        self.stages.iter().map(|s| s.algorithms.len() as u128).product()
    }

    pub fn dim_info(&self) -> &[DimInfo] {
        &self.dims
    }

    pub fn algorithm_ref(&self, global: usize) -> AlgorithmRef {
        self.algorithms[global]
    }

    pub fn algorithm(&self, global: usize) -> &AlgorithmSpec {
        let r = self.algorithms[global];
        &self.stages[r.stage_index].algorithms[r.index_in_stage]
    }

    pub fn global_index(&self, stage_index: usize, index_in_stage: usize) -> usize {
        self.stage_offsets[stage_index] + index_in_stage
    }

    /// Global indices of the algorithms offered at a stage.
    pub fn stage_algorithms(&self, stage_index: usize) -> std::ops::Range<usize> {
        let start = self.stage_offsets[stage_index];
        start..start + self.stages[stage_index].algorithms.len()
    }

    pub fn stage_index(&self, stage: Stage) -> Option<usize> {
        self.stages.iter().position(|s| s.stage == stage)
    }

    /// Human-readable `stage/algorithm` name of a global algorithm index.
    pub fn qualified_name(&self, global: usize) -> String {
        let a = self.algorithm(global);
        format!("{}/{}", a.stage, a.name)
    }

    pub fn find_algorithm(&self, stage_index: usize, name: &str) -> Option<usize> {
        self.stages[stage_index]
            .algorithms
            .iter()
            .position(|a| a.name == name)
            .map(|i| self.global_index(stage_index, i))
    }

    /// Global algorithm index chosen at each stage.
    pub fn choice_indices(&self, config: &PipelineConfig) -> Result<Vec<usize>> {
        if config.stages.len() != self.stages.len() {
            return Err(Error::InvalidConfig(format!(
                "config has {} stages, space has {}",
                config.stages.len(),
                self.stages.len()
            )));
        }
        config
            .stages
            .iter()
            .enumerate()
            .map(|(si, c)| {
                if c.stage != self.stages[si].stage {
                    return Err(Error::InvalidConfig(format!(
                        "stage {si} is '{}' in config but '{}' in space",
                        c.stage, self.stages[si].stage
                    )));
                }
                self.find_algorithm(si, &c.algorithm).ok_or_else(|| {
                    Error::InvalidConfig(format!("unknown algorithm '{}' at stage '{}'", c.algorithm, c.stage))
                })
            })
            .collect()
    }

    /// Validates a configuration, returning it with canonical value types.
    pub fn validate(&self, config: &PipelineConfig) -> Result<PipelineConfig> {
        let choices = self.choice_indices(config)?;
        let mut out = Vec::with_capacity(choices.len());
        for (c, &g) in config.stages.iter().zip(&choices) {
            let alg = self.algorithm(g);
            for k in c.params.keys() {
                if alg.hyperparam(k).is_none() {
                    return Err(Error::InvalidConfig(format!("'{k}' is not a hyperparameter of '{}'", alg.name)));
                }
            }
            let mut params = BTreeMap::new();
            for h in &alg.hyperparams {
                let v = c
                    .params
                    .get(&h.name)
                    .ok_or_else(|| Error::InvalidConfig(format!("missing value for '{}.{}'", alg.name, h.name)))?;
                params.insert(h.name.clone(), h.check(v)?);
            }
            out.push(StageChoice { stage: c.stage, algorithm: c.algorithm.clone(), params });
        }
        Ok(PipelineConfig { stages: out })
    }

    pub fn encode(&self, config: &PipelineConfig) -> Result<EncodedPoint> {
        let config = self.validate(config)?;
        let choices = self.choice_indices(&config)?;
        let mut values = vec![0.0; self.dimension()];
        let mut active = vec![false; self.dimension()];
        for (si, &g) in choices.iter().enumerate() {
            values[si] = self.algorithms[g].index_in_stage as f64;
            active[si] = true;
        }
        for (g, r) in self.algorithms.iter().enumerate() {
            let alg = self.algorithm(g);
            let chosen = choices[r.stage_index] == g;
            for (k, h) in alg.hyperparams.iter().enumerate() {
                let d = r.first_dim + k;
                if chosen {
                    values[d] = h.normalize(&config.stages[r.stage_index].params[&h.name]);
                    active[d] = true;
                } else {
                    values[d] = h.normalize(&h.default);
                }
            }
        }
        Ok(EncodedPoint { values, active })
    }

    pub fn decode(&self, point: &EncodedPoint) -> Result<PipelineConfig> {
        if point.values.len() != self.dimension() {
            return Err(Error::DimensionMismatch { expected: self.dimension(), got: point.values.len() });
        }
        let mut stages = Vec::with_capacity(self.stages.len());
        for (si, s) in self.stages.iter().enumerate() {
            let idx = (point.values[si] + 0.5).floor();
            if !(0.0..s.algorithms.len() as f64).contains(&idx) {
                return Err(Error::InvalidConfig(format!("stage '{}' choice index {idx} out of range", s.stage)));
            }
            let g = self.global_index(si, idx as usize);
            let r = self.algorithms[g];
            let alg = self.algorithm(g);
            let params = alg
                .hyperparams
                .iter()
                .enumerate()
                .map(|(k, h)| (h.name.clone(), h.denormalize(point.values[r.first_dim + k])))
                .collect();
            stages.push(StageChoice { stage: s.stage, algorithm: alg.name.clone(), params });
        }
        Ok(PipelineConfig { stages })
    }

    /// Activity mask implied by a choice vector (global algorithm indices).
    pub fn activity_mask(&self, choices: &[usize]) -> Vec<bool> {
        let mut active = vec![false; self.dimension()];
        active[..self.stages.len()].iter_mut().for_each(|a| *a = true);
        for &g in choices {
            let r = self.algorithms[g];
            active[r.first_dim..r.first_dim + r.n_dims].iter_mut().for_each(|a| *a = true);
        }
        active
    }

    /// Configuration choosing the given algorithms with random hyperparameters.
    pub fn sample_with_choices(&self, choices: &[usize], rng: &mut Rng) -> PipelineConfig {
        let stages = choices
            .iter()
            .map(|&g| {
                let alg = self.algorithm(g);
                StageChoice {
                    stage: alg.stage,
                    algorithm: alg.name.clone(),
                    params: alg.hyperparams.iter().map(|h| (h.name.clone(), h.sample(rng))).collect(),
                }
            })
            .collect();
        PipelineConfig { stages }
    }

    pub fn sample_with(&self, rng: &mut Rng) -> PipelineConfig {
        let choices: Vec<usize> = (0..self.stages.len())
            .map(|si| {
                let r = self.stage_algorithms(si);
                rng.random_range(r)
            })
            .collect();
        self.sample_with_choices(&choices, rng)
    }

    /// Uniform stage choices, uniform (log-uniform) hyperparameters.
    pub fn sample_config(&self, seed: u64) -> PipelineConfig {
        self.sample_with(&mut rng::from_seed(seed))
    }

    /// Configuration using every algorithm's default hyperparameters.
    pub fn default_config(&self, choices: &[usize]) -> PipelineConfig {
        let stages = choices
            .iter()
            .map(|&g| {
                let alg = self.algorithm(g);
                StageChoice {
                    stage: alg.stage,
                    algorithm: alg.name.clone(),
                    params: alg.hyperparams.iter().map(|h| (h.name.clone(), h.default.clone())).collect(),
                }
            })
            .collect();
        PipelineConfig { stages }
    }

    /// Number of distinct configurations, if every hyperparameter is finite.
    pub fn config_count(&self) -> Option<u128> {
        let mut total: u128 = 1;
        for s in &self.stages {
            let mut stage_total: u128 = 0;
            for a in &s.algorithms {
                let mut n: u128 = 1;
                for h in &a.hyperparams {
                    n = n.checked_mul(h.cardinality()? as u128)?;
                }
                stage_total = stage_total.checked_add(n)?;
            }
            total = total.checked_mul(stage_total)?;
        }
        Some(total)
    }

    /// Every configuration of a finite space, or `None` when the space is
    /// continuous or larger than `limit`.
    pub fn enumerate(&self, limit: usize) -> Option<Vec<PipelineConfig>> {
        let count = self.config_count()?;
        if count > limit as u128 {
            return None;
        }
        let mut per_stage: Vec<Vec<StageChoice>> = Vec::new();
        for s in &self.stages {
            let mut options = Vec::new();
            for a in &s.algorithms {
                let mut partial: Vec<BTreeMap<String, ParamValue>> = vec![BTreeMap::new()];
                for h in &a.hyperparams {
                    let values = h.values()?;
                    partial = partial
                        .into_iter()
                        .flat_map(|p| {
                            values.iter().map(move |v| {
                                let mut p = p.clone();
                                p.insert(h.name.clone(), v.clone());
                                p
                            })
                        })
                        .collect();
                }
                options.extend(partial.into_iter().map(|params| StageChoice {
                    stage: s.stage,
                    algorithm: a.name.clone(),
                    params,
                }));
            }
            per_stage.push(options);
        }
        let mut configs: Vec<Vec<StageChoice>> = vec![Vec::new()];
        for options in &per_stage {
            configs = configs
                .into_iter()
                .flat_map(|prefix| {
                    options.iter().map(move |o| {
                        let mut c = prefix.clone();
                        c.push(o.clone());
                        c
                    })
                })
                .collect();
        }
        Some(configs.into_iter().map(|stages| PipelineConfig { stages }).collect())
    }

    pub fn to_definition(&self) -> SpaceDefinition {
        SpaceDefinition::from(self.clone())
    }
}

fn validate_hyperparam(h: &HyperparamSpec) -> std::result::Result<(), String> {
    if h.name.is_empty() {
        return Err("empty name".into());
    }
    match &h.kind {
        ParamKind::Continuous { lo, hi, log_scale } => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(format!("bounds [{lo}, {hi}] must satisfy lo < hi"));
            }
            if *log_scale && *lo <= 0.0 {
                return Err("log_scale requires a positive lower bound".into());
            }
        }
        ParamKind::Integer { lo, hi } => {
            if lo >= hi {
                return Err(format!("bounds [{lo}, {hi}] must satisfy lo < hi"));
            }
        }
        ParamKind::Categorical { choices } => {
            if choices.is_empty() {
                return Err("category list is empty".into());
            }
            let unique: HashSet<&String> = choices.iter().collect();
            if unique.len() != choices.len() {
                return Err("category list has duplicates".into());
            }
        }
    }
    h.check(&h.default).map(|_| ()).map_err(|_| format!("default {} is out of bounds", h.default))
}

pub const REFERENCE_SPACE: &str = include_str!("../spaces/reference.toml");
pub const MINIATURE_SPACE: &str = include_str!("../spaces/miniature.toml");

// ---------------------------------------------------------------------------
// File schema

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceDefinition {
    pub stages: Vec<StageDefinition>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDefinition {
    pub stage: Stage,
    pub algorithms: Vec<AlgorithmDefinition>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmDefinition {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hyperparams: Vec<HyperparamDefinition>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    Continuous,
    Integer,
    Categorical,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamDefinition {
    pub name: String,
    pub kind: KindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[ParamValue; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub default: ParamValue,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub log_scale: bool,
}

impl TryFrom<SpaceDefinition> for SearchSpace {
    type Error = Error;

    fn try_from(def: SpaceDefinition) -> Result<Self> {
        let mut stages = Vec::with_capacity(def.stages.len());
        for s in def.stages {
            let mut algorithms = Vec::with_capacity(s.algorithms.len());
            for a in s.algorithms {
                let mut hyperparams = Vec::with_capacity(a.hyperparams.len());
                for h in a.hyperparams {
                    let ctx = |msg: &str| {
                        Error::InvalidSpace(format!(
                            "stage '{}', algorithm '{}', hyperparameter '{}': {msg}",
                            s.stage, a.name, h.name
                        ))
                    };
                    let kind = match h.kind {
                        KindName::Continuous | KindName::Integer => {
                            let [lo, hi] = h.bounds.as_ref().ok_or_else(|| ctx("missing field 'bounds'"))?;
                            if h.choices.is_some() {
                                return Err(ctx("'choices' is only valid for categorical hyperparameters"));
                            }
                            if h.kind == KindName::Continuous {
                                let lo = lo.as_f64().ok_or_else(|| ctx("bounds must be numeric"))?;
                                let hi = hi.as_f64().ok_or_else(|| ctx("bounds must be numeric"))?;
                                ParamKind::Continuous { lo, hi, log_scale: h.log_scale }
                            } else {
                                if h.log_scale {
                                    return Err(ctx("log_scale is only valid for continuous hyperparameters"));
                                }
                                match (lo, hi) {
                                    (ParamValue::Int(lo), ParamValue::Int(hi)) => {
                                        ParamKind::Integer { lo: *lo, hi: *hi }
                                    }
                                    _ => return Err(ctx("integer bounds must be integers")),
                                }
                            }
                        }
                        KindName::Categorical => {
                            if h.bounds.is_some() || h.log_scale {
                                return Err(ctx("categorical hyperparameters take 'choices' only"));
                            }
                            let choices = h.choices.clone().ok_or_else(|| ctx("missing field 'choices'"))?;
                            ParamKind::Categorical { choices }
                        }
                    };
                    hyperparams.push(HyperparamSpec { name: h.name, kind, default: h.default });
                }
                algorithms.push(AlgorithmSpec { name: a.name, stage: s.stage, hyperparams });
            }
            stages.push(StageSpec { stage: s.stage, algorithms });
        }
        SearchSpace::new(stages)
    }
}

impl From<SearchSpace> for SpaceDefinition {
    fn from(space: SearchSpace) -> Self {
        let stages = space
            .stages
            .into_iter()
            .map(|s| StageDefinition {
                stage: s.stage,
                algorithms: s
                    .algorithms
                    .into_iter()
                    .map(|a| AlgorithmDefinition {
                        name: a.name,
                        hyperparams: a
                            .hyperparams
                            .into_iter()
                            .map(|h| {
                                let (kind, bounds, choices, log_scale) = match h.kind {
                                    ParamKind::Continuous { lo, hi, log_scale } => (
                                        KindName::Continuous,
                                        Some([ParamValue::Real(lo), ParamValue::Real(hi)]),
                                        None,
                                        log_scale,
                                    ),
                                    ParamKind::Integer { lo, hi } => (
                                        KindName::Integer,
                                        Some([ParamValue::Int(lo), ParamValue::Int(hi)]),
                                        None,
                                        false,
                                    ),
                                    ParamKind::Categorical { choices } => {
                                        (KindName::Categorical, None, Some(choices), false)
                                    }
                                };
                                HyperparamDefinition {
                                    name: h.name,
                                    kind,
                                    bounds,
                                    choices,
                                    default: h.default,
                                    log_scale,
                                }
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        SpaceDefinition { stages }
    }
}
