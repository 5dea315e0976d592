//! Bayesian model averaging over the evaluated pipelines.
//!
//! A pipeline's weight is its posterior probability of being the best of
//! those evaluated. Decompositions are drawn from the sample pool in
//! proportion to their posterior; under each, latent scores at every
//! distinct evaluated configuration are drawn jointly from the GP
//! posterior, and a pipeline's weight is the fraction of draws in which it
//! attains the maximum.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bo::{Optimizer, RunState};
use crate::error::{Error, Result};
use crate::gp::SurrogateModel;
use crate::rng::{self, streams, Rng};
use crate::space::PipelineConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSettings {
    pub n_z_samples: usize,
    /// Joint latent draws per sampled decomposition.
    pub n_f_samples: usize,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        EnsembleSettings { n_z_samples: 20, n_f_samples: 2500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    /// First history entry holding this configuration.
    pub history_index: usize,
    pub config: PipelineConfig,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub run_id: String,
    pub n_samples: usize,
    pub seed: u64,
    /// Members with positive weight, heaviest first (history order on ties).
    pub members: Vec<EnsembleMember>,
}

impl EnsembleModel {
    /// Builds a model from raw weights, dropping zeros and renormalizing.
    pub fn from_weights(run_id: &str, n_samples: usize, seed: u64, members: Vec<EnsembleMember>) -> Result<Self> {
        if members.iter().any(|m| !(m.weight >= 0.0 && m.weight.is_finite())) {
            return Err(Error::InvalidArgument("ensemble weights must be finite and nonnegative".into()));
        }
        let mut members: Vec<EnsembleMember> = members.into_iter().filter(|m| m.weight > 0.0).collect();
        let total: f64 = members.iter().map(|m| m.weight).sum();
        if members.is_empty() || !(total > 0.0) {
            return Err(Error::InvalidArgument("ensemble needs a member with positive weight".into()));
        }
        members.iter_mut().for_each(|m| m.weight /= total);
        members.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.history_index.cmp(&b.history_index)));
        Ok(EnsembleModel { run_id: run_id.to_string(), n_samples, seed, members })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }

    /// Keeps the `k` heaviest members and renormalizes.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("truncation needs k >= 1".into()));
        }
        if k >= self.members.len() {
            return Ok(self.clone());
        }
        let kept = self.members.iter().take(k).cloned().collect();
        Self::from_weights(&self.run_id, self.n_samples, self.seed, kept)
    }

    /// Weighted average of per-member scores, keyed by history index.
    pub fn score(&self, member_scores: &HashMap<usize, f64>) -> Result<f64> {
        self.members
            .iter()
            .map(|m| {
                member_scores
                    .get(&m.history_index)
                    .map(|s| m.weight * s)
                    .ok_or_else(|| Error::InvalidArgument(format!("no score for member {}", m.history_index)))
            })
            .sum()
    }
}

/// Draws from `N(mean, cov)`. The covariance is factored by eigen
/// decomposition with negative round-off eigenvalues clipped to zero, so
/// rank-deficient posteriors are fine.
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: cov.nrows() });
        }
        if cov.iter().chain(mean.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("posterior moments are not finite".into()));
        }
        let eig = SymmetricEigen::new(cov);
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = eig.eigenvectors * DMatrix::from_diagonal(&roots);
        Ok(GaussianSampler { mean, factor })
    }

    pub fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        let eps = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(rng));
        &self.mean + &self.factor * eps
    }

    /// How often each coordinate is the largest over `n` draws. Exact ties
    /// go to the lowest index.
    pub fn argmax_counts(&self, n: usize, rng: &mut Rng) -> Vec<u64> {
        let mut counts = vec![0u64; self.mean.len()];
        if counts.is_empty() {
            return counts;
        }
        for _ in 0..n {
            counts[self.sample(rng).argmax().0] += 1;
        }
        counts
    }
}

/// Monte Carlo probability that each coordinate of `N(mean, cov)` is the
/// maximum.
pub fn argmax_probabilities(mean: DVector<f64>, cov: DMatrix<f64>, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let counts = GaussianSampler::new(mean, cov)?.argmax_counts(n, rng);
    Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
}

/// Ensemble weights for a finished (or running) optimization.
pub fn ensemble_weights(
    optimizer: &Optimizer,
    state: &RunState,
    settings: &EnsembleSettings,
    seed: u64,
) -> Result<EnsembleModel> {
    if state.history.is_empty() {
        return Err(Error::InsufficientData("ensemble needs at least one evaluation".into()));
    }
    if settings.n_z_samples == 0 || settings.n_f_samples == 0 {
        return Err(Error::InvalidArgument("ensemble sample counts must be positive".into()));
    }
    let run_id = run_id(optimizer, state);
    let distinct = distinct_configs(state)?;
    let n_samples = settings.n_z_samples * settings.n_f_samples;
    if distinct.len() == 1 {
        let member = EnsembleMember { history_index: 0, config: state.history[0].request.config.clone(), weight: 1.0 };
        return EnsembleModel::from_weights(&run_id, n_samples, seed, vec![member]);
    }
    let probs = state.pool.probabilities();
    if probs.is_empty() || probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument("degenerate sample pool".into()));
    }
    let mut r = rng::substream(seed, streams::ENSEMBLE, 0);
    let pick =
        WeightedIndex::new(&probs).map_err(|e| Error::InvalidArgument(format!("degenerate sample pool: {e}")))?;
    let mut draws = vec![0usize; probs.len()];
    for _ in 0..settings.n_z_samples {
        draws[pick.sample(&mut r)] += 1;
    }

    let (inputs, y, extra) = optimizer.observations(state)?;
    let queries: Vec<_> = distinct.iter().map(|&i| inputs[i].clone()).collect();
    let mut counts = vec![0u64; distinct.len()];
    for (entry, &d) in state.pool.entries().iter().zip(&draws) {
        if d == 0 {
            continue;
        }
        let model = SurrogateModel::condition(
            optimizer.layout().clone(),
            entry.decomposition.clone(),
            entry.params.clone(),
            inputs.clone(),
            y.clone(),
            extra.clone(),
        )?;
        let (mean, cov) = model.joint_posterior(&queries);
        let c = GaussianSampler::new(mean, cov)?.argmax_counts(d * settings.n_f_samples, &mut r);
        counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }
    let members = distinct
        .iter()
        .zip(&counts)
        .map(|(&i, &c)| EnsembleMember {
            history_index: i,
            config: state.history[i].request.config.clone(),
            weight: c as f64 / n_samples as f64,
        })
        .collect();
    EnsembleModel::from_weights(&run_id, n_samples, seed, members)
}

fn run_id(optimizer: &Optimizer, state: &RunState) -> String {
    let o = optimizer.options();
    format!("{}-seed{}-n{}", if o.dataset.is_empty() { "run" } else { &o.dataset }, o.seed, state.history.len())
}

/// History indices of the first occurrence of every configuration.
fn distinct_configs(state: &RunState) -> Result<Vec<usize>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (i, o) in state.history.iter().enumerate() {
        if seen.insert(serde_json::to_string(&o.request.config)?) {
            out.push(i);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn member(i: usize, w: f64) -> EnsembleMember {
        EnsembleMember { history_index: i, config: PipelineConfig { stages: vec![] }, weight: w }
    }

    #[test]
    fn truncation_renormalizes() {
        let m = EnsembleModel::from_weights("r", 1, 0, vec![member(0, 0.7), member(1, 0.2), member(2, 0.1)]).unwrap();
        let t = m.truncate(2).unwrap();
        assert!((t.weights()[0] - 7.0 / 9.0).abs() < 1e-12);
        assert!((t.weights()[1] - 2.0 / 9.0).abs() < 1e-12);
        assert_eq!(m.truncate(5).unwrap(), m);
        assert!(m.truncate(0).is_err());
    }

    #[test]
    fn ties_keep_history_order() {
        let m = EnsembleModel::from_weights("r", 1, 0, vec![member(3, 0.25), member(1, 0.25), member(2, 0.5)]).unwrap();
        let order: Vec<usize> = m.members.iter().map(|m| m.history_index).collect();
        assert_eq!(order, vec![2, 1, 3]);
        assert_eq!(m.truncate(2).unwrap().members[1].history_index, 1);
    }

    #[test]
    fn score_is_weighted_mean() {
        let m = EnsembleModel::from_weights("r", 1, 0, vec![member(0, 0.5), member(1, 0.5)]).unwrap();
        let scores = HashMap::from([(0, 0.6), (1, 0.8)]);
        assert!((m.score(&scores).unwrap() - 0.7).abs() < 1e-12);
        assert!(m.score(&HashMap::from([(0, 0.6)])).is_err());
        let single = EnsembleModel::from_weights("r", 1, 0, vec![member(4, 1.0)]).unwrap();
        assert_eq!(single.score(&HashMap::from([(4, 0.83)])).unwrap(), 0.83);
    }

    #[test]
    fn two_point_weights_match_exceedance_probability() {
        let mean = DVector::from_vec(vec![0.3, 0.1]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
        let mut r = rng::from_seed(5);
        let w = argmax_probabilities(mean, cov, 50_000, &mut r).unwrap();
        let exact = Normal::standard().cdf(0.2 / (0.04f64 + 0.09 - 0.02).sqrt());
        assert!((w[0] - exact).abs() < 0.01, "{} vs {exact}", w[0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_covariance_is_sampled() {
        let mean = DVector::from_vec(vec![0.0, 1.0, 0.5]);
        let mut r = rng::from_seed(1);
        let w = argmax_probabilities(mean, DMatrix::zeros(3, 3), 100, &mut r).unwrap();
        assert_eq!(w, vec![0.0, 1.0, 0.0]);
    }
}
