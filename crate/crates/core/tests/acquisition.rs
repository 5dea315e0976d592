mod common;

use pipebo::space::SearchSpace;

use common::categorical::{top_and_best_ucb, SPACE};

#[test]
fn categorical_space_is_small() {
    let space = SearchSpace::from_toml(SPACE).unwrap();
    assert_eq!(space.config_count(), Some(84));
}

#[test]
fn top_candidate_equals_exhaustive_ucb_argmax() {
    let mismatches: Vec<(u64, f64, f64)> = (0..20u64)
        .map(|case| {
            let (top, best) = top_and_best_ucb(case);
            (case, top, best)
        })
        .filter(|(_, top, best)| (top - best).abs() > 1e-12)
        .collect();
    assert!(mismatches.is_empty(), "{mismatches:?}");
}
