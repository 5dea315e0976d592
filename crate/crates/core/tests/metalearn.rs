mod common;

use pipebo::benchmark::SyntheticBenchmark;
use pipebo::bo::{Optimizer, RunControl, RunOptions, RunState};
use pipebo::data::{Column, Dataset, Table};
use pipebo::gp::KernelParams;
use pipebo::metalearn::{
    calibrate, fit_record, meta_features, similarity_weights, MetaFeatureVector, PriorRecord, WeightingMode,
};
use pipebo::structure::Decomposition;
use proptest::prelude::*;
use rand::Rng as _;

fn finished_run(seed: u64, evaluations: usize) -> RunState {
    let bench = SyntheticBenchmark::standard(seed, 0.005).unwrap();
    let options = RunOptions { max_evaluations: evaluations, seed, ..RunOptions::default() };
    let optimizer = Optimizer::new(bench.space(), &bench, options).unwrap();
    let mut state = optimizer.initial_state();
    optimizer.run(&mut state, &RunControl::default(), &mut ()).unwrap();
    state
}

fn record(id: &str, meta: &[(&str, f64)], seed: u64) -> PriorRecord {
    let mut r = common::rng(seed);
    let m = 2 + (seed as usize % 4);
    let z = Decomposition::random(10, m, &mut r);
    let mut mf = MetaFeatureVector::default();
    for (k, v) in meta {
        mf.insert(*k, *v).unwrap();
    }
    let params = pipebo::gp::random_params(m, 16, &mut r);
    PriorRecord {
        dataset_id: id.into(),
        meta_features: mf,
        m,
        gamma: (0..m).map(|_| r.random_range(0.5..3.0)).collect(),
        mean: params.mean,
        params,
        decomposition: z,
    }
}

#[test]
fn softmax_weights_of_distances_zero_one_two() {
    let w = similarity_weights(&[0.0, 1.0, 2.0], 1.0).unwrap();
    for (got, want) in w.iter().zip([0.665, 0.245, 0.090]) {
        assert!((got - want).abs() < 0.001, "{w:?}");
    }
}

#[test]
fn meta_feature_examples() {
    let mut r = common::rng(1);
    let mut cells: Vec<Vec<Option<f64>>> =
        (0..10).map(|_| (0..100).map(|_| Some(r.random::<f64>())).collect()).collect();
    let full =
        Table::new((0..10).map(|j| format!("c{j}")).collect(), cells.iter().cloned().map(Column::Numeric).collect())
            .unwrap();
    let labels = Column::Numeric((0..100).map(|i| Some((i % 2) as f64)).collect());
    let data = |t: Table| Dataset { features: t, target: labels.clone(), event: None };
    let m = meta_features(&data(full)).unwrap();
    assert_eq!(m.get("missing_fraction"), Some(0.0));
    assert_eq!(m.get("class_imbalance_ratio"), Some(1.0));
    assert!(m.entries.len() >= 20);
    assert!(m.entries.values().all(|v| v.is_finite()));

    let mut removed = 0;
    while removed < 17 {
        let (j, i) = (r.random_range(0..10), r.random_range(0..100));
        if cells[j][i].take().is_some() {
            removed += 1;
        }
    }
    let holed =
        Table::new((0..10).map(|j| format!("c{j}")).collect(), cells.into_iter().map(Column::Numeric).collect())
            .unwrap();
    let m = meta_features(&data(holed)).unwrap();
    assert!((m.get("missing_fraction").unwrap() - 0.017).abs() < 1e-12);
}

#[test]
fn fitted_record_summarizes_the_run() {
    let state = finished_run(3, 30);
    let meta = meta_features(&common::family_dataset(0)).unwrap();
    let rec = fit_record(&state, "d0", meta.clone()).unwrap();
    assert_eq!(rec.decomposition, state.decomposition);
    assert_eq!(rec.m, state.prior.m());
    assert!(rec.gamma.iter().all(|&g| g > 0.0));
    let total: f64 = state.prior.gamma.iter().sum();
    assert!((rec.gamma.iter().sum::<f64>() - total).abs() < 1e-9);
    rec.params.validate(rec.m, 16).unwrap();
    assert_eq!(fit_record(&finished_run(3, 30), "d0", meta.clone()).unwrap(), rec);

    let short = finished_run(3, 8);
    assert!(fit_record(&short, "d0", meta).is_err());
}

#[test]
fn single_record_calibrates_to_itself() {
    let state = finished_run(5, 24);
    let meta = meta_features(&common::family_dataset(1)).unwrap();
    let rec = fit_record(&state, "only", meta.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    rec.save(dir.path()).unwrap();
    let repo = PriorRecord::load_repository(dir.path()).unwrap();
    assert_eq!(repo, vec![rec.clone()]);
    let c =
        calibrate(&meta_features(&common::family_dataset(3)).unwrap(), &repo, WeightingMode::Similarity, 1.0).unwrap();
    assert_eq!(c.weights, vec![("only".to_string(), 1.0)]);
    assert_eq!(c.m, rec.m);
    assert!((c.mean - rec.mean).abs() < 1e-12);
    let (sorted, _) = rec.decomposition.sorted_by_size();
    assert_eq!(c.initial_z, sorted);
    let total: f64 = c.gamma.iter().sum();
    assert!((total - rec.gamma.iter().sum::<f64>()).abs() < 1e-9);
    c.warmstart().unwrap();
}

#[test]
fn zero_temperature_picks_the_identical_record() {
    let repo: Vec<PriorRecord> =
        (0..4).map(|j| record(&format!("r{j}"), &[("a", j as f64), ("b", (j * j) as f64)], j as u64)).collect();
    let new = repo[2].meta_features.clone();
    let c = calibrate(&new, &repo, WeightingMode::Similarity, 0.0).unwrap();
    let eta: Vec<f64> = c.weights.iter().map(|w| w.1).collect();
    assert_eq!(eta, vec![0.0, 0.0, 1.0, 0.0]);
    let c = calibrate(&new, &repo, WeightingMode::Similarity, 1e-3).unwrap();
    assert!(c.weights[2].1 > 0.999);
}

#[test]
fn proportional_mode_weights_by_distance() {
    let repo: Vec<PriorRecord> = (0..3).map(|j| record(&format!("r{j}"), &[("a", j as f64)], 10 + j as u64)).collect();
    let mut new = MetaFeatureVector::default();
    new.insert("a", 0.0).unwrap();
    let c = calibrate(&new, &repo, WeightingMode::DistanceProportional, 1.0).unwrap();
    let eta: Vec<f64> = c.weights.iter().map(|w| w.1).collect();
    // distances 0, 1, 2 in IQR units -> 0, 1/3, 2/3
    assert!((eta[0] - 0.0).abs() < 1e-12 && (eta[1] - 1.0 / 3.0).abs() < 1e-12 && (eta[2] - 2.0 / 3.0).abs() < 1e-12);
}

fn repository(seed: u64, n: usize) -> Vec<PriorRecord> {
    let mut r = common::rng(seed);
    (0..n)
        .map(|j| {
            let meta =
                [("a", r.random_range(0.0..10.0)), ("b", r.random_range(-1.0..1.0)), ("c", r.random_range(0.0..1e3))];
            record(&format!("r{j}"), &meta, seed.wrapping_add(j as u64))
        })
        .collect()
}

fn query(seed: u64) -> MetaFeatureVector {
    let mut r = common::rng(seed ^ 0xabc);
    let mut m = MetaFeatureVector::default();
    m.insert("a", r.random_range(0.0..10.0)).unwrap();
    m.insert("b", r.random_range(-1.0..1.0)).unwrap();
    m.insert("c", r.random_range(0.0..1e3)).unwrap();
    m
}

fn etas(c: &pipebo::metalearn::CalibratedPrior) -> Vec<f64> {
    c.weights.iter().map(|w| w.1).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_a_distribution(seed in any::<u64>(), n in 1usize..7, tau in 0.05f64..5.0) {
        let repo = repository(seed, n);
        let c = calibrate(&query(seed), &repo, WeightingMode::Similarity, tau).unwrap();
        prop_assert!((etas(&c).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(etas(&c).iter().all(|&w| w >= 0.0));
        c.params.validate(c.m, 16).unwrap();
        prop_assert_eq!(c.gamma.len(), c.m);
    }

    #[test]
    fn weights_follow_repository_permutations(seed in any::<u64>(), n in 2usize..7) {
        let repo = repository(seed, n);
        let mut reversed = repo.clone();
        reversed.reverse();
        let a = calibrate(&query(seed), &repo, WeightingMode::Similarity, 1.0).unwrap();
        let b = calibrate(&query(seed), &reversed, WeightingMode::Similarity, 1.0).unwrap();
        let mut wa = a.weights.clone();
        let mut wb = b.weights.clone();
        wa.sort_by(|x, y| x.0.cmp(&y.0));
        wb.sort_by(|x, y| x.0.cmp(&y.0));
        for (x, y) in wa.iter().zip(&wb) {
            prop_assert_eq!(&x.0, &y.0);
            prop_assert!((x.1 - y.1).abs() < 1e-12);
        }
    }

    #[test]
    fn rescaling_a_meta_feature_leaves_weights_unchanged(seed in any::<u64>(), n in 2usize..7) {
        let repo = repository(seed, n);
        let new = query(seed);
        let scale = |m: &MetaFeatureVector| {
            let mut m = m.clone();
            let c = m.get("c").unwrap();
            m.insert("c", 1000.0 * c).unwrap();
            m
        };
        let scaled_repo: Vec<PriorRecord> =
            repo.iter().map(|r| PriorRecord { meta_features: scale(&r.meta_features), ..r.clone() }).collect();
        let a = calibrate(&new, &repo, WeightingMode::Similarity, 1.0).unwrap();
        let b = calibrate(&scale(&new), &scaled_repo, WeightingMode::Similarity, 1.0).unwrap();
        for (x, y) in etas(&a).iter().zip(&etas(&b)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn kernel_params_average_in_log_space() {
    let mut a = record("a", &[("x", 0.0)], 1);
    let mut b = record("b", &[("x", 1.0)], 2);
    for r in [&mut a, &mut b] {
        r.m = 1;
        r.gamma = vec![1.0];
        r.decomposition = Decomposition::single(10);
        r.params = KernelParams::new(1, 16);
    }
    a.params.lengthscales = vec![0.1; 16];
    b.params.lengthscales = vec![1.0; 16];
    let mut new = MetaFeatureVector::default();
    new.insert("x", 0.5).unwrap();
    let c = calibrate(&new, &[a, b], WeightingMode::Similarity, 1.0).unwrap();
    assert!((etas(&c)[0] - 0.5).abs() < 1e-12);
    // geometric mean of 0.1 and 1.0
    assert!((c.params.lengthscales[0] - 0.1f64.sqrt()).abs() < 1e-9);
}
