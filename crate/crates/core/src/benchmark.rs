//! Synthetic pipeline benchmark with a known additive structure.
//!
//! The score of a configuration is a sum of per-subspace components. Each
//! component sees only the tuple `tau` of chosen algorithms its subspace
//! owns:
//!
//! ```text
//! f_m = level(tau) * prod_{a in tau} q_a        (0 when tau is empty)
//! ```
//!
//! where `q_a` in `(0, 1]` is a product of per-hyperparameter responses
//! (a Gaussian bump over the normalized value, or a preference table for
//! categorical values). Levels are drawn independently per tuple, so two
//! tuples of the same subspace behave as unrelated functions while
//! different subspaces add up. Levels are positive, so the optimum puts
//! every response at its peak and only the algorithm choice needs
//! enumerating.
//!
//! Scores are mapped affinely onto `[0.5, 0.9]`, chance level to optimum
//! on an AUC-like scale, with the offset split evenly across components.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{EvalStatus, EvaluationRequest, EvaluationResult, Evaluator};
use crate::rng::{self, Rng};
use crate::space::{ParamKind, PipelineConfig, SearchSpace, StageChoice};
use crate::structure::Decomposition;

const BASELINE: f64 = 0.5;
const SPAN: f64 = 0.4;

/// Largest number of algorithm combinations enumerated to locate the optimum.
const MAX_ENUMERATED_PIPELINES: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ParamResponse {
    Bump { center: f64, width: f64, floor: f64 },
    Preference { weights: Vec<f64> },
}

impl ParamResponse {
    /// Response to an encoded value (normalized numeric or category index).
    pub fn value(&self, u: f64) -> f64 {
        match self {
            ParamResponse::Bump { center, width, floor } => {
                floor + (1.0 - floor) * (-(u - center).powi(2) / (2.0 * width * width)).exp()
            }
            ParamResponse::Preference { weights } => weights[u as usize],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmResponse {
    pub params: Vec<ParamResponse>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TupleLevel {
    pub subspace: usize,
    /// Owned algorithms, at most one per stage, ascending.
    pub algorithms: Vec<usize>,
    pub level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentTables {
    pub algorithms: Vec<AlgorithmResponse>,
    /// One entry per non-empty tuple of every subspace.
    pub levels: Vec<TupleLevel>,
}

/// Ranges the random tables are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkShape {
    pub level: (f64, f64),
    pub width: (f64, f64),
    pub floor: f64,
    /// Weight range for non-preferred categorical values.
    pub other_choice: (f64, f64),
}

impl Default for BenchmarkShape {
    fn default() -> Self {
        BenchmarkShape { level: (0.1, 1.0), width: (0.2, 0.4), floor: 0.6, other_choice: (0.7, 0.95) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnownOptimum {
    pub config: PipelineConfig,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    space: SearchSpace,
    partition: Decomposition,
    noise_sd: f64,
    seed: u64,
    tables: ComponentTables,
    scale: f64,
    known_optimum: KnownOptimum,
}

impl SyntheticBenchmark {
    /// Builds a benchmark over `space` whose score is exactly additive
    /// across `partition`, with tables drawn from `seed`.
    pub fn new(
        space: SearchSpace,
        partition: Decomposition,
        noise_sd: f64,
        seed: u64,
        shape: BenchmarkShape,
    ) -> Result<Self> {
        partition.check_space(&space)?;
        let mut r = rng::substream(seed, "benchmark", 0);
        let algorithms = (0..space.n_algorithms())
            .map(|g| {
                let params = space
                    .algorithm(g)
                    .hyperparams
                    .iter()
                    .map(|h| match &h.kind {
                        ParamKind::Categorical { choices } => {
                            let preferred = r.random_range(0..choices.len());
                            let weights = (0..choices.len())
                                .map(|k| if k == preferred { 1.0 } else { uniform(&mut r, shape.other_choice) })
                                .collect();
                            ParamResponse::Preference { weights }
                        }
                        _ => {
                            let raw = uniform(&mut r, (0.1, 0.9));
                            // snap onto a representable value so the peak is attainable
                            let center = h.normalize(&h.denormalize(raw));
                            ParamResponse::Bump { center, width: uniform(&mut r, shape.width), floor: shape.floor }
                        }
                    })
                    .collect();
                AlgorithmResponse { params }
            })
            .collect();
        let levels = owned_tuples(&space, &partition)
            .into_iter()
            .map(|(subspace, algorithms)| TupleLevel { subspace, algorithms, level: uniform(&mut r, shape.level) })
            .collect();
        Self::from_tables(space, partition, noise_sd, seed, ComponentTables { algorithms, levels })
    }

    /// The benchmark used by the acceptance suite: the miniature space with
    /// three cross-stage subspaces.
    pub fn standard(seed: u64, noise_sd: f64) -> Result<Self> {
        let space = SearchSpace::miniature();
        let partition = standard_partition(&space);
        Self::new(space, partition, noise_sd, seed, BenchmarkShape::default())
    }

    pub fn from_tables(
        space: SearchSpace,
        partition: Decomposition,
        noise_sd: f64,
        seed: u64,
        tables: ComponentTables,
    ) -> Result<Self> {
        partition.check_space(&space)?;
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(Error::InvalidArgument("noise_sd must be finite and nonnegative".into()));
        }
        let expected = owned_tuples(&space, &partition);
        if tables.algorithms.len() != space.n_algorithms()
            || tables.levels.len() != expected.len()
            || tables.levels.iter().zip(&expected).any(|(l, (m, t))| l.subspace != *m || &l.algorithms != t)
        {
            return Err(Error::InvalidArgument("component tables do not match the space".into()));
        }
        if tables.levels.iter().any(|l| !(l.level >= 0.0 && l.level.is_finite())) {
            return Err(Error::InvalidArgument("tuple levels must be finite and nonnegative".into()));
        }
        let mut bench = SyntheticBenchmark {
            space,
            partition,
            noise_sd,
            seed,
            tables,
            scale: 1.0,
            known_optimum: KnownOptimum { config: PipelineConfig { stages: vec![] }, value: 0.0 },
        };
        let (config, raw) = bench.locate_optimum()?;
        if !(raw > 0.0) {
            return Err(Error::InvalidArgument("benchmark optimum has zero raw score".into()));
        }
        bench.scale = SPAN / raw;
        let value = bench.score(&config)?;
        bench.known_optimum = KnownOptimum { config, value };
        bench.verify_optimum()?;
        Ok(bench)
    }

    /// A related benchmark: same space and partition, tables perturbed
    /// multiplicatively (levels) and additively (bump centers).
    pub fn perturbed(&self, seed: u64, magnitude: f64) -> Result<Self> {
        let mut r = rng::substream(seed, "benchmark-perturbation", 0);
        let mut tables = self.tables.clone();
        for (g, alg) in tables.algorithms.iter_mut().enumerate() {
            for (h, resp) in self.space.algorithm(g).hyperparams.iter().zip(alg.params.iter_mut()) {
                if let ParamResponse::Bump { center, .. } = resp {
                    let moved = (*center + 0.25 * magnitude * normal(&mut r)).clamp(0.05, 0.95);
                    *center = h.normalize(&h.denormalize(moved));
                }
            }
        }
        for l in &mut tables.levels {
            l.level *= (magnitude * normal(&mut r)).exp();
        }
        Self::from_tables(self.space.clone(), self.partition.clone(), self.noise_sd, seed, tables)
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn partition(&self) -> &Decomposition {
        &self.partition
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tables(&self) -> &ComponentTables {
        &self.tables
    }

    pub fn known_optimum(&self) -> &KnownOptimum {
        &self.known_optimum
    }

    /// Whether `score` lies within `fraction` (relative) of the optimum.
    pub fn within(&self, score: f64, fraction: f64) -> bool {
        score >= (1.0 - fraction) * self.known_optimum.value
    }

    /// Noiseless per-subspace contributions; they sum to [`Self::score`].
    pub fn component_scores(&self, config: &PipelineConfig) -> Result<Vec<f64>> {
        let point = self.space.encode(config)?;
        let choices = self.space.choice_indices(config)?;
        let q: Vec<f64> = choices
            .iter()
            .map(|&g| {
                let r = self.space.algorithm_ref(g);
                self.tables.algorithms[g]
                    .params
                    .iter()
                    .enumerate()
                    .map(|(k, resp)| resp.value(point.values[r.first_dim + k]))
                    .product()
            })
            .collect();
        let share = BASELINE / self.partition.n_subspaces() as f64;
        Ok(self.raw_components(&choices, &q).into_iter().map(|v| share + v * self.scale).collect())
    }

    pub fn score(&self, config: &PipelineConfig) -> Result<f64> {
        Ok(self.component_scores(config)?.iter().sum())
    }

    /// Per-fold scores: the noiseless score plus seeded Gaussian noise,
    /// clipped to `[0, 1]`.
    pub fn fold_scores(&self, config: &PipelineConfig, folds: usize, fold_seed: u64) -> Result<Vec<f64>> {
        let score = self.score(config)?;
        if self.noise_sd == 0.0 {
            return Ok(vec![score; folds]);
        }
        let key = serde_json::to_string(config)?;
        let mut r = rng::substream(self.seed, &format!("noise/{key}"), fold_seed);
        Ok((0..folds).map(|_| (score + self.noise_sd * normal(&mut r)).clamp(0.0, 1.0)).collect())
    }

    fn raw_components(&self, choices: &[usize], q: &[f64]) -> Vec<f64> {
        (0..self.partition.n_subspaces())
            .map(|m| {
                let owned: Vec<usize> = (0..choices.len()).filter(|&i| self.partition.get(choices[i]) == m).collect();
                if owned.is_empty() {
                    return 0.0;
                }
                let tuple: Vec<usize> = owned.iter().map(|&i| choices[i]).collect();
                let level = self
                    .tables
                    .levels
                    .iter()
                    .find(|l| l.subspace == m && l.algorithms == tuple)
                    .map_or(0.0, |l| l.level);
                level * owned.iter().map(|&i| q[i]).product::<f64>()
            })
            .collect()
    }

    fn peak_params(&self, g: usize) -> StageChoice {
        let alg = self.space.algorithm(g);
        let params = alg
            .hyperparams
            .iter()
            .zip(&self.tables.algorithms[g].params)
            .map(|(h, resp)| {
                let v = match resp {
                    ParamResponse::Bump { center, .. } => h.denormalize(*center),
                    ParamResponse::Preference { weights } => {
                        let best = (0..weights.len()).max_by(|&a, &b| weights[a].total_cmp(&weights[b])).unwrap_or(0);
                        h.denormalize(best as f64)
                    }
                };
                (h.name.clone(), v)
            })
            .collect();
        StageChoice { stage: alg.stage, algorithm: alg.name.clone(), params }
    }

    /// Enumerates every algorithm combination with all responses at their peak.
    fn locate_optimum(&self) -> Result<(PipelineConfig, f64)> {
        if self.space.pipeline_count() > MAX_ENUMERATED_PIPELINES {
            return Err(Error::InvalidArgument("too many pipelines to locate the benchmark optimum".into()));
        }
        let ranges: Vec<std::ops::Range<usize>> =
            (0..self.space.n_stages()).map(|s| self.space.stage_algorithms(s)).collect();
        let mut choices: Vec<usize> = ranges.iter().map(|r| r.start).collect();
        let mut best: Option<(Vec<usize>, f64)> = None;
        loop {
            let q = vec![1.0; choices.len()];
            let raw: f64 = self.raw_components(&choices, &q).iter().sum();
            if best.as_ref().is_none_or(|(_, v)| raw > *v) {
                best = Some((choices.clone(), raw));
            }
            // odometer increment
            let mut s = choices.len();
            loop {
                if s == 0 {
                    let (c, v) = best.expect("at least one pipeline");
                    let config = PipelineConfig { stages: c.iter().map(|&g| self.peak_params(g)).collect() };
                    return Ok((config, v));
                }
                s -= 1;
                choices[s] += 1;
                if choices[s] < ranges[s].end {
                    break;
                }
                choices[s] = ranges[s].start;
            }
        }
    }

    /// Checks the located optimum against dense per-hyperparameter grids
    /// and a batch of random configurations.
    fn verify_optimum(&self) -> Result<()> {
        for g in 0..self.space.n_algorithms() {
            for (h, resp) in self.space.algorithm(g).hyperparams.iter().zip(&self.tables.algorithms[g].params) {
                let grid: Vec<f64> = match &h.kind {
                    ParamKind::Categorical { choices } => (0..choices.len()).map(|k| k as f64).collect(),
                    _ => (0..=1000).map(|k| h.normalize(&h.denormalize(k as f64 / 1000.0))).collect(),
                };
                let peak = match resp {
                    ParamResponse::Bump { center, .. } => resp.value(*center),
                    ParamResponse::Preference { weights } => weights.iter().cloned().fold(f64::MIN, f64::max),
                };
                if grid.iter().any(|&u| resp.value(u) > peak) {
                    return Err(Error::InvalidArgument(format!("response of {} exceeds its peak", h.name)));
                }
            }
        }
        let mut r = rng::substream(self.seed, "benchmark-verify", 0);
        for _ in 0..500 {
            let c = self.space.sample_with(&mut r);
            if self.score(&c)? > self.known_optimum.value {
                return Err(Error::InvalidArgument("random configuration beats the located optimum".into()));
            }
        }
        Ok(())
    }
}

impl Evaluator for SyntheticBenchmark {
    fn evaluate(&self, request: &EvaluationRequest) -> Result<EvaluationResult> {
        request.check()?;
        match self.fold_scores(&request.config, request.folds, request.seed) {
            Ok(scores) => EvaluationResult::ok(&request.request_id, scores),
            Err(e) => Ok(EvaluationResult::failed(&request.request_id, EvalStatus::Failed, e.to_string())),
        }
    }
}

/// Ground-truth partition of the miniature space: three subspaces, each
/// spanning all three stages.
pub fn standard_partition(space: &SearchSpace) -> Decomposition {
    let groups: [&[&str]; 3] = [
        &["mean_imputer", "pca", "logistic_regression", "svm"],
        &["knn_imputer", "select_k_best", "random_forest"],
        &["iterative_imputer", "passthrough", "gradient_boosting"],
    ];
    let mut assignment = vec![0; space.n_algorithms()];
    for (m, names) in groups.iter().enumerate() {
        for name in *names {
            let g = (0..space.n_stages())
                .find_map(|s| space.find_algorithm(s, name))
                .expect("standard partition names belong to the miniature space");
            assignment[g] = m;
        }
    }
    Decomposition::new(assignment, 3).expect("labels in range")
}

/// Every non-empty tuple of algorithms a subspace can own in one pipeline,
/// grouped by subspace in ascending order.
fn owned_tuples(space: &SearchSpace, partition: &Decomposition) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for m in 0..partition.n_subspaces() {
        let mut tuples: Vec<Vec<usize>> = vec![Vec::new()];
        for s in 0..space.n_stages() {
            let owned: Vec<usize> = space.stage_algorithms(s).filter(|&g| partition.get(g) == m).collect();
            let mut next = tuples.clone();
            for t in &tuples {
                for &g in &owned {
                    let mut e = t.clone();
                    e.push(g);
                    next.push(e);
                }
            }
            tuples = next;
        }
        tuples.sort();
        out.extend(tuples.into_iter().filter(|t| !t.is_empty()).map(|t| (m, t)));
    }
    out
}

fn uniform(r: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * r.random::<f64>()
}

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}
