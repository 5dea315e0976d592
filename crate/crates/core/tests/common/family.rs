//! Leave-one-out warm starting on a family of related synthetic benchmarks.

use pipebo::benchmark::SyntheticBenchmark;
use pipebo::bo::{Optimizer, RunControl, RunOptions, Warmstart};
use pipebo::metalearn::{calibrate, fit_record, meta_features, PriorRecord, WeightingMode};

pub const MEMBERS: usize = 5;
const NOISE: f64 = 0.005;
const RECORD_BUDGET: usize = 60;

/// Shared partition, perturbed component tables.
pub fn members() -> Vec<SyntheticBenchmark> {
    let base = SyntheticBenchmark::standard(0, NOISE).unwrap();
    (0..MEMBERS).map(|k| base.perturbed(1000 + k as u64, 0.3).unwrap()).collect()
}

/// One prior record per member from a finished run.
pub fn records(members: &[SyntheticBenchmark]) -> Vec<PriorRecord> {
    members
        .iter()
        .enumerate()
        .map(|(k, bench)| {
            let options = RunOptions { max_evaluations: RECORD_BUDGET, seed: 50 + k as u64, ..RunOptions::default() };
            let optimizer = Optimizer::new(bench.space(), bench, options).unwrap();
            let mut state = optimizer.initial_state();
            optimizer.run(&mut state, &RunControl::default(), &mut ()).unwrap();
            let meta = meta_features(&super::family_dataset(k)).unwrap();
            fit_record(&state, &format!("member{k}"), meta).unwrap()
        })
        .collect()
}

/// Noiseless score of the incumbent after `iterations` iterations.
pub fn incumbent_after(bench: &SyntheticBenchmark, seed: u64, iterations: usize, warmstart: Option<Warmstart>) -> f64 {
    let options = RunOptions { max_evaluations: 150, seed, warmstart, ..RunOptions::default() };
    let optimizer = Optimizer::new(bench.space(), bench, options).unwrap();
    let mut state = optimizer.initial_state();
    let control = RunControl { stop_after: Some(iterations), ..RunControl::default() };
    optimizer.run(&mut state, &control, &mut ()).unwrap();
    bench.score(&state.incumbent().unwrap().request.config).unwrap()
}

pub struct Comparison {
    pub held_out: usize,
    pub warm: f64,
    pub cold: f64,
}

/// Seed `s` holds out member `s % 5`, calibrates on the other four and
/// runs warm and cold for `iterations` iterations with the same seed.
pub fn leave_one_out(seeds: std::ops::Range<u64>, iterations: usize) -> Vec<Comparison> {
    let members = members();
    let records = records(&members);
    seeds
        .map(|s| {
            let h = s as usize % MEMBERS;
            let repo: Vec<PriorRecord> =
                records.iter().enumerate().filter(|(k, _)| *k != h).map(|(_, r)| r.clone()).collect();
            let meta = meta_features(&super::family_dataset(h)).unwrap();
            let prior = calibrate(&meta, &repo, WeightingMode::Similarity, 1.0).unwrap();
            Comparison {
                held_out: h,
                warm: incumbent_after(&members[h], s, iterations, Some(prior.warmstart().unwrap())),
                cold: incumbent_after(&members[h], s, iterations, None),
            }
        })
        .collect()
}
