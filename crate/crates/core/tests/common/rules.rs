//! Exhaustive rule enumeration and rule-mining fixtures.

use std::collections::BTreeMap;

use pipebo::data::{Column, Table};
use pipebo::interpreter::{discretize_features, mine_rules, AssociationRule, MiningParams, RiskStrata};
use pipebo::rng::Rng;
use rand::Rng as _;
use statrs::distribution::{Beta, ContinuousCDF};

pub fn binary_table(features: &[Vec<u8>]) -> Table {
    Table::new(
        (0..features.len()).map(|j| format!("f{j:02}")).collect(),
        features.iter().map(|v| Column::Numeric(v.iter().map(|&x| Some(x as f64)).collect())).collect(),
    )
    .unwrap()
}

/// Plain rule record for comparisons.
#[derive(Debug, PartialEq)]
pub struct Found {
    pub text: String,
    pub support: usize,
    pub hits: usize,
    pub mean: f64,
    pub p_above: f64,
}

pub fn found(r: &AssociationRule) -> Found {
    Found { text: r.text(), support: r.support, hits: r.hits, mean: r.posterior_mean, p_above: r.p_above_base }
}

/// Every rule of at most two conditions on distinct binary features,
/// counted row by row and filtered and ranked as documented.
pub fn exhaustive(features: &[Vec<u8>], labels: &[usize], strata: &RiskStrata, p: &MiningParams) -> Vec<Found> {
    let n_rows = labels.len();
    let mut conds: Vec<(usize, u8)> = Vec::new();
    for (j, v) in features.iter().enumerate() {
        if v.contains(&0) && v.contains(&1) {
            conds.push((j, 0));
            conds.push((j, 1));
        }
    }
    let mut sets: Vec<Vec<(usize, u8)>> = conds.iter().map(|&c| vec![c]).collect();
    for (i, &a) in conds.iter().enumerate() {
        for &b in &conds[i + 1..] {
            if a.0 != b.0 {
                sets.push(vec![a, b]);
            }
        }
    }
    let mut out = Vec::new();
    for r in 0..strata.n_strata() {
        let base = labels.iter().filter(|&&l| l == r).count() as f64 / n_rows as f64;
        if base == 0.0 {
            continue;
        }
        let mut rules: Vec<(f64, usize, String, Found)> = Vec::new();
        for set in &sets {
            let rows: Vec<usize> = (0..n_rows).filter(|&i| set.iter().all(|&(j, v)| features[j][i] == v)).collect();
            if rows.len() < p.min_support {
                continue;
            }
            let s = rows.iter().filter(|&&i| labels[i] == r).count();
            let alpha = s as f64 + p.a;
            let beta = (rows.len() - s) as f64 + p.b;
            let p_above = 1.0 - Beta::new(alpha, beta).unwrap().cdf(base);
            if p_above < p.min_posterior_confidence {
                continue;
            }
            let lhs: Vec<String> = set.iter().map(|(j, v)| format!("f{j:02} = {v}")).collect();
            let lhs = lhs.join(" AND ");
            let text = format!("{lhs} => {}", strata.labels[r]);
            let mean = alpha / (alpha + beta);
            rules.push((mean, set.len(), lhs, Found { text, support: rows.len(), hits: s, mean, p_above }));
        }
        rules.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then_with(|| x.2.cmp(&y.2)));
        out.extend(rules.into_iter().take(p.top_k).map(|x| x.3));
    }
    out
}

pub fn random_instance(r: &mut Rng, n_features: usize, n_rows: usize) -> (Vec<Vec<u8>>, Vec<f64>) {
    let density: Vec<f64> = (0..n_features).map(|_| r.random_range(0.2..0.8)).collect();
    let features: Vec<Vec<u8>> =
        density.iter().map(|&d| (0..n_rows).map(|_| (r.random::<f64>() < d) as u8).collect()).collect();
    // risk leans on the first two features so some rules clear the bar
    let risk = (0..n_rows)
        .map(|i| (0.25 * features[0][i] as f64 + 0.35 * features[1][i] as f64 + 0.4 * r.random::<f64>()).min(1.0))
        .collect();
    (features, risk)
}

/// Mined and brute-force rule lists for instance `case` (3 to 12 features).
pub fn brute_force_case(case: u64, top_k: usize) -> (Vec<Found>, Vec<Found>) {
    let mut r = super::rng(case);
    let n_features = 3 + (case as usize % 10);
    let (features, risk) = random_instance(&mut r, n_features, 150);
    let table = binary_table(&features);
    let strata = RiskStrata::tertiles(&risk).unwrap();
    let labels = strata.stratify(&risk).unwrap();
    let grid = discretize_features(&table, 4).unwrap();
    let params =
        MiningParams { min_support: 8, max_len: 2, min_posterior_confidence: 0.8, top_k, ..MiningParams::default() };
    let mined = mine_rules(&grid, &labels, &strata, &params).unwrap();
    (mined.rules.iter().map(found).collect(), exhaustive(&features, &labels, &strata, &params))
}

/// Cohort whose risk is high exactly for diabetic patients over 50 on
/// lipid-lowering drugs.
pub fn planted(r: &mut Rng, n: usize) -> (Table, Vec<f64>) {
    let mut cols: BTreeMap<&str, Vec<Option<f64>>> = BTreeMap::new();
    let mut risk = Vec::with_capacity(n);
    for _ in 0..n {
        let age = r.random_range(20.0..80.0f64).round();
        let diabetic = r.random_bool(0.4);
        let lipid = r.random_bool(0.4);
        cols.entry("age").or_default().push(Some(age));
        cols.entry("diabetic").or_default().push(Some(diabetic as u8 as f64));
        cols.entry("lipid_lowering").or_default().push(Some(lipid as u8 as f64));
        cols.entry("smoker").or_default().push(Some(r.random_bool(0.3) as u8 as f64));
        cols.entry("bmi").or_default().push(Some(r.random_range(18.0..40.0)));
        cols.entry("sex").or_default().push(Some(r.random_bool(0.5) as u8 as f64));
        risk.push(if diabetic && lipid && age > 50.0 { r.random_range(0.85..1.0) } else { r.random_range(0.0..0.7) });
    }
    let names = cols.keys().map(|s| s.to_string()).collect();
    let columns = cols.into_values().map(Column::Numeric).collect();
    (Table::new(names, columns).unwrap(), risk)
}

/// Top rule for the high-risk tertile of a planted cohort.
pub fn planted_top_rule(seed: u64, n: usize) -> Option<AssociationRule> {
    let (table, risk) = planted(&mut super::rng(seed), n);
    let strata = RiskStrata::tertiles(&risk).unwrap();
    let labels = strata.stratify(&risk).unwrap();
    let grid = discretize_features(&table, 4).unwrap();
    let mined = mine_rules(&grid, &labels, &strata, &MiningParams::default()).unwrap();
    let high = strata.n_strata() - 1;
    mined.rules.into_iter().find(|r| r.stratum == high)
}

pub fn is_planted_rule(rule: &AssociationRule) -> bool {
    let text = rule.text();
    text.contains("diabetic = 1") && text.contains("lipid_lowering = 1") && text.contains("age > ")
}
