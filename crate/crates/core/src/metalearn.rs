//! Empirical-Bayes warm starts from earlier runs.
//!
//! Each finished run leaves a [`PriorRecord`]: the dataset's meta-features,
//! the learned decomposition, its fitted kernel parameters and a posterior
//! estimate of the structure prior. A new dataset gets a [`CalibratedPrior`]
//! by weighting the records by meta-feature similarity.
//!
//! Subspace labels mean nothing across runs, so per-subspace quantities are
//! aligned by descending subspace size before they are averaged.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bo::{RunState, Warmstart};
use crate::data::{Column, Dataset};
use crate::error::{Error, Result};
use crate::gp::KernelParams;
use crate::structure::{Decomposition, StructurePrior};

/// Smallest history a record may be fitted from.
pub const MIN_RECORD_HISTORY: usize = 10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatureVector {
    pub entries: BTreeMap<String, f64>,
    /// Notes on entries that could not be computed (they are set to 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetaFeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.get(name).copied()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!("meta-feature '{name}' is not finite")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Adds user-defined entries, e.g. domain descriptors of a cohort.
    pub fn extend(&mut self, extra: &BTreeMap<String, f64>) -> Result<()> {
        for (k, &v) in extra {
            self.insert(k.clone(), v)?;
        }
        Ok(())
    }
}

/// The built-in statistical meta-features of a dataset.
pub fn meta_features(data: &Dataset) -> Result<MetaFeatureVector> {
    let table = &data.features;
    let n = table.n_rows();
    let p = table.n_columns();
    if n == 0 {
        return Err(Error::InsufficientData("dataset has no rows".into()));
    }
    let mut out = MetaFeatureVector::default();
    let mut put = |name: &str, v: f64| out.entries.insert(name.to_string(), if v.is_finite() { v } else { 0.0 });
    let pf = p.max(1) as f64;
    put("n_samples", n as f64);
    put("n_features", p as f64);
    put("log_n_samples", (n as f64).ln());
    put("log_n_features", (p.max(1) as f64).ln());
    put("feature_sample_ratio", p as f64 / n as f64);

    let cells = (n * p).max(1) as f64;
    let missing: usize = table.columns().iter().map(Column::n_missing).sum();
    put("missing_fraction", missing as f64 / cells);
    let rows_missing = (0..n).filter(|&i| table.columns().iter().any(|c| c.is_missing(i))).count();
    put("rows_with_missing_fraction", rows_missing as f64 / n as f64);
    put("columns_with_missing_fraction", table.columns().iter().filter(|c| c.n_missing() > 0).count() as f64 / pf);

    let n_cat = table.columns().iter().filter(|c| matches!(c, Column::Categorical(_))).count();
    put("categorical_fraction", n_cat as f64 / pf);
    let cards: Vec<f64> = table
        .columns()
        .iter()
        .filter(|c| matches!(c, Column::Categorical(_)))
        .map(|c| c.levels().len() as f64)
        .collect();
    put("mean_categorical_cardinality", mean(&cards).unwrap_or(0.0));
    put("constant_feature_fraction", table.columns().iter().filter(|c| c.levels().len() <= 1).count() as f64 / pf);

    // per-column moments over present values
    let mut warnings = Vec::new();
    let mut skews = Vec::new();
    let mut kurts = Vec::new();
    let mut outliers = Vec::new();
    let mut numeric: Vec<&Vec<Option<f64>>> = Vec::new();
    for (name, col) in table.names().iter().zip(table.columns()) {
        let Column::Numeric(v) = col else { continue };
        let present = col.present();
        if present.is_empty() {
            warnings.push(format!("column '{name}' is entirely missing; its moments are set to 0"));
            continue;
        }
        numeric.push(v);
        if let Some((s, k)) = skew_kurtosis(&present) {
            skews.push(s);
            kurts.push(k);
        }
        let (m, sd) = mean_sd(&present);
        if sd > 0.0 {
            outliers.push(present.iter().filter(|x| ((*x - m) / sd).abs() > 3.0).count() as f64 / present.len() as f64);
        }
    }
    let abs_skews: Vec<f64> = skews.iter().map(|s| s.abs()).collect();
    put("mean_abs_skewness", mean(&abs_skews).unwrap_or(0.0));
    put("max_abs_skewness", abs_skews.iter().cloned().fold(0.0, f64::max));
    put("mean_kurtosis", mean(&kurts).unwrap_or(0.0));
    put("mean_outlier_fraction", mean(&outliers).unwrap_or(0.0));

    let mut corr = Vec::new();
    for i in 0..numeric.len() {
        for j in (i + 1)..numeric.len() {
            if let Some(r) = pearson(numeric[i], numeric[j]) {
                corr.push(r.abs());
            }
        }
    }
    put("mean_abs_feature_correlation", mean(&corr).unwrap_or(0.0));
    put("max_abs_feature_correlation", corr.iter().cloned().fold(0.0, f64::max));

    // target
    let target_levels = data.target.levels();
    let counts: Vec<f64> = match &data.target {
        Column::Categorical(v) => {
            target_levels.iter().map(|l| v.iter().filter(|x| x.as_deref() == Some(l.as_str())).count() as f64).collect()
        }
        Column::Numeric(v) if data.event.is_none() && target_levels.len() <= 20 => target_levels
            .iter()
            .map(|l| v.iter().flatten().filter(|x| crate::data::format_number(**x) == *l).count() as f64)
            .collect(),
        Column::Numeric(_) => Vec::new(),
    };
    let total: f64 = counts.iter().sum();
    put("n_classes", counts.len() as f64);
    if counts.len() >= 2 {
        let max = counts.iter().cloned().fold(0.0, f64::max);
        let min = counts.iter().cloned().fold(f64::INFINITY, f64::min);
        put("class_imbalance_ratio", if min > 0.0 { max / min } else { 0.0 });
        put("minority_class_fraction", min / total);
        put(
            "target_entropy",
            -counts.iter().filter(|&&c| c > 0.0).map(|c| (c / total) * (c / total).ln()).sum::<f64>(),
        );
    } else {
        put("class_imbalance_ratio", 1.0);
        put("minority_class_fraction", if counts.len() == 1 { 1.0 } else { 0.0 });
        put("target_entropy", 0.0);
    }
    let target_numeric: Option<Vec<Option<f64>>> = match &data.target {
        Column::Numeric(v) => Some(v.clone()),
        Column::Categorical(v) if target_levels.len() == 2 => {
            Some(v.iter().map(|x| x.as_ref().map(|s| (*s == target_levels[1]) as u8 as f64)).collect())
        }
        Column::Categorical(_) => None,
    };
    let tcorr: Vec<f64> = match &target_numeric {
        Some(t) => numeric.iter().filter_map(|c| pearson(c, t)).map(f64::abs).collect(),
        None => Vec::new(),
    };
    put("mean_abs_target_correlation", mean(&tcorr).unwrap_or(0.0));
    put("max_abs_target_correlation", tcorr.iter().cloned().fold(0.0, f64::max));
    let censoring = match &data.event {
        Some(e) => {
            let present: Vec<f64> = e.iter().flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().filter(|&&x| x == 0.0).count() as f64 / present.len() as f64
            }
        }
        None => 0.0,
    };
    put("censoring_rate", censoring);
    out.warnings = warnings;
    Ok(out)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Population skewness and excess kurtosis; `None` for constant data.
fn skew_kurtosis(v: &[f64]) -> Option<(f64, f64)> {
    let (m, sd) = mean_sd(v);
    if !(sd > 0.0) {
        return None;
    }
    let n = v.len() as f64;
    let s = v.iter().map(|x| ((x - m) / sd).powi(3)).sum::<f64>() / n;
    let k = v.iter().map(|x| ((x - m) / sd).powi(4)).sum::<f64>() / n - 3.0;
    Some((s, k))
}

/// Pearson correlation over rows where both values are present.
fn pearson(a: &[Option<f64>], b: &[Option<f64>]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = a.iter().zip(b).filter_map(|(x, y)| Some(((*x)?, (*y)?))).collect();
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub dataset_id: String,
    pub meta_features: MetaFeatureVector,
    pub m: usize,
    /// Posterior-mean concentrations, scaled to the prior's total.
    pub gamma: Vec<f64>,
    pub mean: f64,
    pub params: KernelParams,
    pub decomposition: Decomposition,
}

/// Summarizes a run for the repository.
pub fn fit_record(state: &RunState, dataset_id: &str, meta: MetaFeatureVector) -> Result<PriorRecord> {
    if state.history.len() < MIN_RECORD_HISTORY {
        return Err(Error::InsufficientData(format!(
            "a prior record needs at least {MIN_RECORD_HISTORY} evaluations, run has {}",
            state.history.len()
        )));
    }
    if !state.fitted {
        return Err(Error::Unfitted);
    }
    let z = state.decomposition.clone();
    let gamma = &state.prior.gamma;
    let total: f64 = gamma.iter().sum();
    let raw: Vec<f64> = z.counts().iter().zip(gamma).map(|(&n, &g)| n as f64 + g).collect();
    let raw_total: f64 = raw.iter().sum();
    let gamma = raw.iter().map(|v| v / raw_total * total).collect();
    Ok(PriorRecord {
        dataset_id: dataset_id.to_string(),
        meta_features: meta,
        m: state.prior.m(),
        gamma,
        mean: state.params.mean,
        params: state.params.clone(),
        decomposition: z,
    })
}

impl PriorRecord {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let safe: String = self
            .dataset_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect();
        let path = dir.join(format!("{safe}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    /// Every `*.json` record in `dir`, sorted by dataset id.
    pub fn load_repository(dir: impl AsRef<Path>) -> Result<Vec<PriorRecord>> {
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::MissingArtifact(format!("{}: {e}", dir.display())))?;
        let mut out = Vec::new();
        for entry in entries {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                out.push(serde_json::from_str::<PriorRecord>(&std::fs::read_to_string(&path)?)?);
            }
        }
        out.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id));
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    /// `eta_j` proportional to `exp(-l_j / tau)`.
    #[default]
    Similarity,
    /// `eta_j = l_j / sum_k l_k`, which favours dissimilar datasets.
    DistanceProportional,
}

impl std::str::FromStr for WeightingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(WeightingMode::Similarity),
            "distance_proportional" => Ok(WeightingMode::DistanceProportional),
            other => Err(Error::InvalidArgument(format!("unknown weighting mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPrior {
    pub m: usize,
    pub gamma: Vec<f64>,
    pub mean: f64,
    pub params: KernelParams,
    pub initial_z: Decomposition,
    /// `(dataset id, eta)` in repository order.
    pub weights: Vec<(String, f64)>,
}

impl CalibratedPrior {
    pub fn warmstart(&self) -> Result<Warmstart> {
        Ok(Warmstart {
            prior: StructurePrior::new(self.gamma.clone())?,
            params: self.params.clone(),
            initial_z: self.initial_z.clone(),
        })
    }
}

/// Standardized L1 distances from `new` to every record, over the names
/// both vectors carry. Each entry is scaled by the repository's
/// interquartile range, or by the largest deviation from the median when
/// the IQR vanishes.
pub fn distances(new: &MetaFeatureVector, repository: &[PriorRecord]) -> Vec<f64> {
    let mut scale: BTreeMap<&str, f64> = BTreeMap::new();
    for (name, &v) in &new.entries {
        let mut values: Vec<f64> = repository.iter().filter_map(|r| r.meta_features.get(name)).collect();
        if values.is_empty() {
            continue;
        }
        values.sort_by(f64::total_cmp);
        let median = quantile(&values, 0.5);
        let iqr = quantile(&values, 0.75) - quantile(&values, 0.25);
        let s = if iqr > 0.0 {
            iqr
        } else {
            values.iter().chain(std::iter::once(&v)).map(|x| (x - median).abs()).fold(0.0, f64::max)
        };
        scale.insert(name, s);
    }
    repository
        .iter()
        .map(|r| {
            new.entries
                .iter()
                .filter_map(|(name, &v)| {
                    let s = *scale.get(name.as_str())?;
                    let w = r.meta_features.get(name)?;
                    Some(if s > 0.0 { (v - w).abs() / s } else { 0.0 })
                })
                .sum()
        })
        .collect()
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Softmax of `-d / tau`. As `tau -> 0` all mass goes to the nearest
/// records (shared equally on ties).
pub fn similarity_weights(distances: &[f64], tau: f64) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::InvalidArgument("no distances to weight".into()));
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument("temperature must be nonnegative".into()));
    }
    let min = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = if tau == 0.0 {
        distances.iter().map(|&d| (d == min) as u8 as f64).collect()
    } else {
        distances.iter().map(|&d| (-(d - min) / tau).exp()).collect()
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

pub fn calibrate(
    new: &MetaFeatureVector,
    repository: &[PriorRecord],
    mode: WeightingMode,
    tau: f64,
) -> Result<CalibratedPrior> {
    let Some(first) = repository.first() else {
        return Err(Error::InvalidArgument("meta-learning repository is empty".into()));
    };
    let h = first.params.lengthscales.len();
    let n_alg = first.decomposition.n_algorithms();
    for r in repository {
        if r.params.lengthscales.len() != h || r.decomposition.n_algorithms() != n_alg {
            return Err(Error::InvalidArgument(format!(
                "record '{}' belongs to a different search space",
                r.dataset_id
            )));
        }
        r.params.validate(r.m, h)?;
    }
    let d = distances(new, repository);
    let eta = match mode {
        WeightingMode::Similarity => similarity_weights(&d, tau)?,
        WeightingMode::DistanceProportional => {
            let total: f64 = d.iter().sum();
            if !(total > 0.0) {
                return Err(Error::InvalidArgument(
                    "all distances are zero, so proportional weights are undefined; use similarity mode".into(),
                ));
            }
            d.iter().map(|l| l / total).collect()
        }
    };

    let m = (repository.iter().zip(&eta).map(|(r, w)| w * r.m as f64).sum::<f64>().round() as usize).max(1);
    let aligned: Vec<Aligned> = repository.iter().map(|r| Aligned::new(r, m)).collect();
    let wsum = |f: &dyn Fn(&Aligned) -> f64| aligned.iter().zip(&eta).map(|(a, w)| w * f(a)).sum::<f64>();
    let gamma: Vec<f64> = (0..m).map(|k| wsum(&|a| a.gamma[k])).collect();
    let params = KernelParams {
        signal_variance: (0..m).map(|k| wsum(&|a| a.params.signal_variance[k].ln()).exp()).collect(),
        rho: (0..m).map(|k| wsum(&|a| a.params.rho[k])).collect(),
        lengthscales: (0..h).map(|i| wsum(&|a| a.params.lengthscales[i].ln()).exp()).collect(),
        noise_variance: wsum(&|a| a.params.noise_variance.ln()).exp(),
        mean: wsum(&|a| a.params.mean),
    }
    .clamped();
    let best = (0..eta.len()).fold(0, |b, j| if eta[j] > eta[b] { j } else { b });
    let mean = wsum(&|a| a.mean);
    Ok(CalibratedPrior {
        m,
        gamma,
        mean,
        params: KernelParams { mean, ..params },
        initial_z: aligned[best].z.clone(),
        weights: repository.iter().zip(&eta).map(|(r, &w)| (r.dataset_id.clone(), w)).collect(),
    })
}

/// A record relabeled by descending subspace size and fitted to `m`
/// subspaces: missing slots repeat the record's smallest subspace, surplus
/// subspaces fold into the last slot.
struct Aligned {
    gamma: Vec<f64>,
    params: KernelParams,
    mean: f64,
    z: Decomposition,
}

impl Aligned {
    fn new(r: &PriorRecord, m: usize) -> Self {
        let (sorted, perm) = r.decomposition.sorted_by_size();
        let mut order = vec![0; perm.len()];
        for (old, &new) in perm.iter().enumerate() {
            order[new] = old;
        }
        let pick = |k: usize| order[k.min(order.len() - 1)];
        let assignment = sorted.assignment().iter().map(|&k| k.min(m - 1)).collect();
        Aligned {
            gamma: (0..m).map(|k| r.gamma[pick(k)]).collect(),
            params: KernelParams {
                signal_variance: (0..m).map(|k| r.params.signal_variance[pick(k)]).collect(),
                rho: (0..m).map(|k| r.params.rho[pick(k)]).collect(),
                ..r.params.clone()
            },
            mean: r.mean,
            z: Decomposition::new(assignment, m).expect("labels clipped into range"),
        }
    }
}
