//! Synthetic benchmark suite: structure recovery, evaluations to a
//! near-optimal pipeline against seeded random search, and batch diversity.
//!
//! Seed `s` runs the optimizer with seed `s` on
//! `SyntheticBenchmark::standard(s, noise)`, and random search with seed
//! `s` on the same benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use crate::benchmark::SyntheticBenchmark;
use crate::bo::{Optimizer, RunControl, RunOptions};
use crate::error::Result;
use crate::rng;
use crate::structure::adjusted_rand_index;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    pub budget: usize,
    pub noise_sd: f64,
    /// Relative distance to the optimum that counts as a hit.
    pub tolerance: f64,
    /// Random-search evaluations before giving up on a seed.
    pub random_cap: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { seeds: (0..10).collect(), budget: 150, noise_sd: 0.005, tolerance: 0.05, random_cap: 100_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    /// 1-based evaluation count at which a pipeline within tolerance was
    /// first evaluated (judged on the noiseless score).
    pub hit: Option<usize>,
    pub ari: f64,
    pub map: Vec<usize>,
    pub best: f64,
    pub optimum: f64,
    pub batches: usize,
    pub diversity_violations: Vec<String>,
    pub seconds: f64,
}

pub fn optimizer_run(seed: u64, options: &SuiteOptions) -> Result<SeedRun> {
    let bench = SyntheticBenchmark::standard(seed, options.noise_sd)?;
    let run_options = RunOptions { max_evaluations: options.budget, seed, ..RunOptions::default() };
    let optimizer = Optimizer::new(bench.space(), &bench, run_options)?;
    let mut state = optimizer.initial_state();
    let started = Instant::now();
    optimizer.run(&mut state, &RunControl::default(), &mut ())?;
    let seconds = started.elapsed().as_secs_f64();
    let mut hit = None;
    for (i, o) in state.history.iter().enumerate() {
        if bench.within(bench.score(&o.request.config)?, options.tolerance) {
            hit = Some(i + 1);
            break;
        }
    }
    let diversity_violations = state
        .batches
        .iter()
        .filter_map(|b| b.proposal.check_diversity().err().map(|e| format!("iteration {}: {e}", b.iteration)))
        .collect();
    Ok(SeedRun {
        seed,
        hit,
        ari: adjusted_rand_index(state.decomposition.assignment(), bench.partition().assignment()),
        map: state.decomposition.assignment().to_vec(),
        best: state.incumbent().map_or(f64::NAN, |o| o.score),
        optimum: bench.known_optimum().value,
        batches: state.batches.len(),
        diversity_violations,
        seconds,
    })
}

/// Evaluations uniform random search needs to reach the tolerance, or
/// `None` when `cap` draws do not suffice.
pub fn random_search_hit(bench: &SyntheticBenchmark, seed: u64, tolerance: f64, cap: usize) -> Result<Option<usize>> {
    let mut r = rng::substream(seed, "random-search", 0);
    for i in 0..cap {
        let config = bench.space().sample_with(&mut r);
        if bench.within(bench.score(&config)?, tolerance) {
            return Ok(Some(i + 1));
        }
    }
    Ok(None)
}

/// Median with misses ranked above every hit; `None` when the median
/// itself falls on a miss.
pub fn median_hits(hits: &[Option<usize>]) -> Option<f64> {
    if hits.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = hits.iter().map(|h| h.map_or(f64::INFINITY, |n| n as f64)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    m.is_finite().then_some(m)
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub options: SuiteOptions,
    pub runs: Vec<SeedRun>,
    pub random: Vec<Option<usize>>,
}

impl SuiteReport {
    pub fn recovered(&self, min_ari: f64) -> usize {
        self.runs.iter().filter(|r| r.ari >= min_ari).count()
    }

    pub fn optimizer_median(&self) -> Option<f64> {
        median_hits(&self.runs.iter().map(|r| r.hit).collect::<Vec<_>>())
    }

    pub fn random_median(&self) -> Option<f64> {
        median_hits(&self.random)
    }

    pub fn diversity_violations(&self) -> usize {
        self.runs.iter().map(|r| r.diversity_violations.len()).sum()
    }

    pub fn total_batches(&self) -> usize {
        self.runs.iter().map(|r| r.batches).sum()
    }

    pub fn render(&self) -> String {
        let mut out = String::from("seed  hit  random  ari     best    optimum  seconds  map\n");
        let show = |h: Option<usize>| h.map_or("-".to_string(), |n| n.to_string());
        for (r, rs) in self.runs.iter().zip(&self.random) {
            let _ = writeln!(
                out,
                "{:>4}  {:>3}  {:>6}  {:>6.3}  {:.4}  {:.4}   {:>7.1}  {:?}",
                r.seed,
                show(r.hit),
                show(*rs),
                r.ari,
                r.best,
                r.optimum,
                r.seconds,
                r.map
            );
        }
        let med = |m: Option<f64>| m.map_or("-".to_string(), |v| format!("{v:.1}"));
        let _ = writeln!(out, "recovered (ari >= 0.8): {}/{}", self.recovered(0.8), self.runs.len());
        let _ = writeln!(
            out,
            "median evaluations to hit: optimizer {}, random search {}",
            med(self.optimizer_median()),
            med(self.random_median())
        );
        let _ = writeln!(
            out,
            "batch diversity violations: {} in {} batches",
            self.diversity_violations(),
            self.total_batches()
        );
        out
    }
}

/// Runs every seed, calling `progress` after each optimizer run.
pub fn run_suite(options: &SuiteOptions, mut progress: impl FnMut(&SeedRun)) -> Result<SuiteReport> {
    let mut runs = Vec::new();
    let mut random = Vec::new();
    for &seed in &options.seeds {
        let run = optimizer_run(seed, options)?;
        progress(&run);
        runs.push(run);
        let bench = SyntheticBenchmark::standard(seed, options.noise_sd)?;
        random.push(random_search_hit(&bench, seed, options.tolerance, options.random_cap)?);
    }
    Ok(SuiteReport { options: options.clone(), runs, random })
}
