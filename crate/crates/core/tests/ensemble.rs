mod common;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use pipebo::benchmark::SyntheticBenchmark;
use pipebo::bo::{Optimizer, RunControl, RunOptions};
use pipebo::ensemble::{argmax_probabilities, ensemble_weights, EnsembleMember, EnsembleModel, EnsembleSettings};
use pipebo::space::PipelineConfig;
use pipebo::structure::{Decomposition, SamplePool};
use proptest::prelude::*;

use common::oracles::{exceedance, BIVARIATE_CASES};

#[test]
fn near_duplicates_share_weight() {
    let d = common::scenarios::near_duplicates(50_000);
    assert!(d.corr_pair > 0.99);
    assert!(d.corr_other.abs() < 1e-6);
    let (full, independent) = (d.pair_full, d.pair_independent);
    assert!(independent - full >= -0.01, "correlated {full}, independent {independent}");
    // the duplicate pair behaves like one pipeline against the third
    assert!((full - 0.5).abs() < 0.02);
    assert!((independent - 2.0 / 3.0).abs() < 0.02);
}

#[test]
fn symmetric_pair_splits_evenly() {
    let mean = DVector::from_vec(vec![0.3, 0.3]);
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
    let w = argmax_probabilities(mean, cov, 50_000, &mut common::rng(3)).unwrap();
    assert!((w[0] - 0.5).abs() < 0.01 && (w[1] - 0.5).abs() < 0.01, "{w:?}");
}

#[test]
fn two_point_weights_match_bivariate_normal_exceedance() {
    for (k, &(m1, m2, v1, v2, c)) in BIVARIATE_CASES.iter().enumerate() {
        let exact = exceedance(m1, m2, v1, v2, c);
        let mean = DVector::from_vec(vec![m1, m2]);
        let cov = DMatrix::from_row_slice(2, 2, &[v1, c, c, v2]);
        let w = argmax_probabilities(mean, cov, 50_000, &mut common::rng(10 + k as u64)).unwrap();
        assert!((w[0] - exact).abs() < 0.01, "case {k}: {} vs {exact}", w[0]);
    }
}

fn short_run(seed: u64) -> (SyntheticBenchmark, RunOptions) {
    let bench = SyntheticBenchmark::standard(seed, 0.005).unwrap();
    let options = RunOptions { max_evaluations: 22, seed, ..RunOptions::default() };
    (bench, options)
}

#[test]
fn run_weights_are_normalized_deterministic_and_label_free() {
    let (bench, options) = short_run(4);
    let optimizer = Optimizer::new(bench.space(), &bench, options).unwrap();
    let mut state = optimizer.initial_state();
    optimizer.run(&mut state, &RunControl::default(), &mut ()).unwrap();
    let settings = EnsembleSettings { n_z_samples: 10, n_f_samples: 2000 };
    let e = ensemble_weights(&optimizer, &state, &settings, 9).unwrap();
    assert!((e.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(e.weights().iter().all(|&w| w > 0.0));
    let mut configs: Vec<String> = e.members.iter().map(|m| serde_json::to_string(&m.config).unwrap()).collect();
    configs.sort();
    configs.dedup();
    assert_eq!(configs.len(), e.members.len());
    assert_eq!(ensemble_weights(&optimizer, &state, &settings, 9).unwrap(), e);

    // relabel subspaces in every pool entry: weights move only by round-off
    let m = state.prior.m();
    let perm: Vec<usize> = (0..m).map(|k| (k + 2) % m).collect();
    let mut relabeled = state.clone();
    let mut pool = SamplePool::new(state.pool.capacity());
    for entry in state.pool.entries() {
        let assignment = entry.decomposition.assignment().iter().map(|&k| perm[k]).collect();
        let z = Decomposition::new(assignment, m).unwrap();
        let mut p = entry.params.clone();
        for (k, &to) in perm.iter().enumerate() {
            p.signal_variance[to] = entry.params.signal_variance[k];
            p.rho[to] = entry.params.rho[k];
        }
        pool.insert(z, entry.log_posterior, p).unwrap();
    }
    relabeled.pool = pool;
    let f = ensemble_weights(&optimizer, &relabeled, &settings, 9).unwrap();
    let by_index =
        |e: &EnsembleModel| -> HashMap<usize, f64> { e.members.iter().map(|m| (m.history_index, m.weight)).collect() };
    let (wa, wb) = (by_index(&e), by_index(&f));
    for (i, w) in &wa {
        assert!((w - wb.get(i).copied().unwrap_or(0.0)).abs() < 0.01, "member {i}");
    }
}

fn member(i: usize, w: f64) -> EnsembleMember {
    EnsembleMember { history_index: i, config: PipelineConfig { stages: Vec::new() }, weight: w }
}

proptest! {
    #[test]
    fn weights_always_sum_to_one(raw in proptest::collection::vec(0.0f64..1e3, 1..40), k in 1usize..50) {
        prop_assume!(raw.iter().any(|&w| w > 0.0));
        let members = raw.iter().enumerate().map(|(i, &w)| member(i, w)).collect();
        let e = EnsembleModel::from_weights("p", 1, 0, members).unwrap();
        prop_assert!((e.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let t = e.truncate(k).unwrap();
        prop_assert!((t.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(t.members.len() == k.min(e.members.len()));
        prop_assert!(t.weights().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn ensemble_score_ignores_member_order(raw in proptest::collection::vec(0.01f64..1.0, 1..10), seed in any::<u64>()) {
        let members: Vec<EnsembleMember> = raw.iter().enumerate().map(|(i, &w)| member(i, w)).collect();
        let scores: HashMap<usize, f64> = (0..raw.len()).map(|i| (i, common::uniform(&mut common::rng(seed + i as u64)))).collect();
        let mut reversed = members.clone();
        reversed.reverse();
        let a = EnsembleModel::from_weights("p", 1, 0, members).unwrap().score(&scores).unwrap();
        let b = EnsembleModel::from_weights("p", 1, 0, reversed).unwrap().score(&scores).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
