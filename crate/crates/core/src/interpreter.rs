//! Rule-based explanations of risk predictions.
//!
//! Predictions are cut into risk strata, features are turned into Boolean
//! conditions, and conjunctions of conditions are mined level by level
//! (apriori style). Each (rule, stratum) pair is scored by the Beta
//! posterior of the rule's confidence for that stratum.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::data::{format_number, Column, Table};
use crate::error::{Error, Result};

pub const MAX_RULE_LENGTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskStrata {
    /// Strictly increasing cut points inside `(0, 1)`.
    pub thresholds: Vec<f64>,
    pub labels: Vec<String>,
}

impl RiskStrata {
    pub fn new(thresholds: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != thresholds.len() + 1 {
            return Err(Error::DimensionMismatch { expected: thresholds.len() + 1, got: labels.len() });
        }
        if thresholds.windows(2).any(|w| !(w[0] < w[1])) || thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidArgument("strata thresholds must increase strictly inside (0, 1)".into()));
        }
        Ok(RiskStrata { thresholds, labels })
    }

    /// `k` equal-count strata of `scores`: threshold `i` is the score at
    /// sorted position `ceil(i n / k)`.
    pub fn quantiles(scores: &[f64], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument("need at least two strata".into()));
        }
        check_scores(scores)?;
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut thresholds: Vec<f64> = (1..k).map(|i| sorted[((i * n).div_ceil(k)).min(n - 1)]).collect();
        thresholds.dedup();
        thresholds.retain(|t| *t > 0.0 && *t < 1.0);
        let labels = default_labels(thresholds.len() + 1);
        Self::new(thresholds, labels)
    }

    pub fn tertiles(scores: &[f64]) -> Result<Self> {
        Self::quantiles(scores, 3)
    }

    pub fn n_strata(&self) -> usize {
        self.labels.len()
    }

    /// Stratum of each score: `[t_k, t_{k+1})`, top stratum closed at 1.
    pub fn stratify(&self, scores: &[f64]) -> Result<Vec<usize>> {
        check_scores(scores)?;
        Ok(scores.iter().map(|&s| self.thresholds.iter().filter(|&&t| t <= s).count()).collect())
    }
}

fn default_labels(n: usize) -> Vec<String> {
    match n {
        1 => vec!["all".into()],
        2 => vec!["low".into(), "high".into()],
        3 => vec!["low".into(), "medium".into(), "high".into()],
        _ => (0..n).map(|i| format!("stratum_{i}")).collect(),
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InsufficientData("no scores".into()));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("risk score {s} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "value", rename_all = "snake_case")]
pub enum Predicate {
    Le(f64),
    Gt(f64),
    Eq(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: String,
    pub predicate: Predicate,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.predicate {
            Predicate::Le(t) => write!(f, "{} <= {}", self.feature, format_threshold(*t)),
            Predicate::Gt(t) => write!(f, "{} > {}", self.feature, format_threshold(*t)),
            Predicate::Eq(v) => write!(f, "{} = {}", self.feature, v),
        }
    }
}

fn format_threshold(t: f64) -> String {
    let s = format!("{t:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Boolean conditions over a table, with the rows each one holds on.
#[derive(Clone, Debug)]
pub struct ConditionGrid {
    pub conditions: Vec<Condition>,
    pub notices: Vec<String>,
    masks: Vec<Bits>,
    n_rows: usize,
}

impl ConditionGrid {
    pub fn masks(&self, i: usize) -> &Bits {
        &self.masks[i]
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }
}

/// Quantile thresholds for numeric features (both sides of each), equality
/// conditions for categorical and two-valued features. Constant features
/// are skipped. Missing cells satisfy no condition.
pub fn discretize_features(table: &Table, bins: usize) -> Result<ConditionGrid> {
    if bins < 2 {
        return Err(Error::InvalidArgument("need at least 2 bins per feature".into()));
    }
    if table.n_rows() == 0 {
        return Err(Error::InsufficientData("no rows to discretize".into()));
    }
    let n = table.n_rows();
    let mut conditions = Vec::new();
    let mut masks = Vec::new();
    let mut notices = Vec::new();
    for (name, col) in table.names().iter().zip(table.columns()) {
        let levels = col.levels();
        if levels.len() < 2 {
            notices.push(format!("feature '{name}' is constant; no conditions"));
            continue;
        }
        match col {
            Column::Categorical(v) => {
                for l in levels {
                    masks.push(Bits::from_fn(n, |i| v[i].as_deref() == Some(l.as_str())));
                    conditions.push(Condition { feature: name.clone(), predicate: Predicate::Eq(l) });
                }
            }
            Column::Numeric(v) if levels.len() == 2 => {
                for l in levels {
                    masks.push(Bits::from_fn(n, |i| v[i].is_some_and(|x| format_number(x) == l)));
                    conditions.push(Condition { feature: name.clone(), predicate: Predicate::Eq(l) });
                }
            }
            Column::Numeric(v) => {
                let mut present = col.present();
                present.sort_by(f64::total_cmp);
                let max = *present.last().expect("at least two levels");
                let mut cuts: Vec<f64> =
                    (1..bins).map(|k| quantile_lower(&present, k as f64 / bins as f64)).filter(|&t| t < max).collect();
                cuts.dedup();
                for t in cuts {
                    masks.push(Bits::from_fn(n, |i| v[i].is_some_and(|x| x <= t)));
                    conditions.push(Condition { feature: name.clone(), predicate: Predicate::Le(t) });
                    masks.push(Bits::from_fn(n, |i| v[i].is_some_and(|x| x > t)));
                    conditions.push(Condition { feature: name.clone(), predicate: Predicate::Gt(t) });
                }
            }
        }
    }
    Ok(ConditionGrid { conditions, notices, masks, n_rows: n })
}

/// Lower empirical quantile: the smallest value with at least `q n` values
/// at or below it. Thresholds are always observed values.
fn quantile_lower(sorted: &[f64], q: f64) -> f64 {
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

/// Fixed-length bit set over rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bits(Vec<u64>);

impl Bits {
    pub fn from_fn(n: usize, f: impl Fn(usize) -> bool) -> Self {
        let mut words = vec![0u64; n.div_ceil(64)];
        for i in (0..n).filter(|&i| f(i)) {
            words[i / 64] |= 1 << (i % 64);
        }
        Bits(words)
    }

    pub fn and(&self, other: &Bits) -> Bits {
        Bits(self.0.iter().zip(&other.0).map(|(a, b)| a & b).collect())
    }

    pub fn count(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningParams {
    pub min_support: usize,
    pub max_len: usize,
    /// Beta prior on a rule's confidence.
    pub a: f64,
    pub b: f64,
    /// Extra prior successes per condition on the named feature.
    pub boosts: BTreeMap<String, f64>,
    /// Minimum `P(confidence > stratum base rate)`.
    pub min_posterior_confidence: f64,
    /// Rules kept per stratum.
    pub top_k: usize,
    pub credible_level: f64,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams {
            min_support: 10,
            max_len: 3,
            a: 1.0,
            b: 1.0,
            boosts: BTreeMap::new(),
            min_posterior_confidence: 0.95,
            top_k: 5,
            credible_level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationRule {
    pub conditions: Vec<Condition>,
    pub stratum: usize,
    pub stratum_label: String,
    /// Rows matching the conditions.
    pub support: usize,
    /// Rows matching the conditions and falling in the stratum.
    pub hits: usize,
    pub prior_a: f64,
    pub prior_b: f64,
    pub posterior_mean: f64,
    pub credible_interval: (f64, f64),
    /// Posterior probability that confidence exceeds the stratum base rate.
    pub p_above_base: f64,
    pub lift: f64,
}

impl AssociationRule {
    pub fn text(&self) -> String {
        let lhs: Vec<String> = self.conditions.iter().map(|c| c.to_string()).collect();
        format!("{} => {}", lhs.join(" AND "), self.stratum_label)
    }

    fn key(&self) -> String {
        self.conditions.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" AND ")
    }
}

impl fmt::Display for AssociationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}  [n={}, hits={}, mean={:.3}, CI=({:.3}, {:.3}), lift={:.2}]",
            self.text(),
            self.support,
            self.hits,
            self.posterior_mean,
            self.credible_interval.0,
            self.credible_interval.1,
            self.lift
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MinedRules {
    pub rules: Vec<AssociationRule>,
    pub notices: Vec<String>,
}

/// Frequent condition sets by level-wise search. Sets hold at most one
/// condition per feature; a set of length `l + 1` is only counted when all
/// its length-`l` subsets are frequent.
pub fn frequent_sets(grid: &ConditionGrid, min_support: usize, max_len: usize) -> Vec<(Vec<usize>, Bits)> {
    let mut out = Vec::new();
    let mut level: Vec<(Vec<usize>, Bits)> = (0..grid.conditions.len())
        .filter(|&i| grid.masks[i].count() >= min_support)
        .map(|i| (vec![i], grid.masks[i].clone()))
        .collect();
    let mut len = 1;
    while !level.is_empty() {
        out.extend(level.iter().cloned());
        if len == max_len {
            break;
        }
        let frequent: HashSet<&[usize]> = level.iter().map(|(s, _)| s.as_slice()).collect();
        let mut next = Vec::new();
        for (i, (a, bits_a)) in level.iter().enumerate() {
            for (b, _) in &level[i + 1..] {
                if a[..len - 1] != b[..len - 1] {
                    break;
                }
                let last = b[len - 1];
                if a.iter().any(|&c| grid.conditions[c].feature == grid.conditions[last].feature) {
                    continue;
                }
                let mut cand = a.clone();
                cand.push(last);
                let all_frequent = (0..cand.len()).all(|drop| {
                    let sub: Vec<usize> =
                        cand.iter().enumerate().filter(|(k, _)| *k != drop).map(|(_, &c)| c).collect();
                    frequent.contains(sub.as_slice())
                });
                if !all_frequent {
                    continue;
                }
                let bits = bits_a.and(&grid.masks[last]);
                if bits.count() >= min_support {
                    next.push((cand, bits));
                }
            }
        }
        level = next;
        len += 1;
    }
    out
}

/// Scores one condition set for one stratum.
#[allow(clippy::too_many_arguments)]
fn score_rule(
    grid: &ConditionGrid,
    set: &[usize],
    support_bits: &Bits,
    stratum_bits: &Bits,
    stratum: usize,
    strata: &RiskStrata,
    base_rate: f64,
    params: &MiningParams,
) -> Result<AssociationRule> {
    let n = support_bits.count();
    let s = support_bits.and(stratum_bits).count();
    let conditions: Vec<Condition> = set.iter().map(|&i| grid.conditions[i].clone()).collect();
    let boost: f64 = conditions.iter().filter_map(|c| params.boosts.get(&c.feature)).sum();
    let a = params.a + boost;
    let b = params.b;
    let alpha = s as f64 + a;
    let beta = (n - s) as f64 + b;
    let dist = Beta::new(alpha, beta).map_err(|e| Error::InvalidArgument(format!("Beta posterior: {e}")))?;
    let tail = (1.0 - params.credible_level) / 2.0;
    Ok(AssociationRule {
        conditions,
        stratum,
        stratum_label: strata.labels[stratum].clone(),
        support: n,
        hits: s,
        prior_a: a,
        prior_b: b,
        posterior_mean: alpha / (alpha + beta),
        credible_interval: (dist.inverse_cdf(tail), dist.inverse_cdf(1.0 - tail)),
        p_above_base: 1.0 - dist.cdf(base_rate),
        lift: if n > 0 && base_rate > 0.0 { (s as f64 / n as f64) / base_rate } else { 0.0 },
    })
}

/// Mines rules explaining stratum membership. Per stratum, rules are
/// ranked by posterior mean, then shorter first, then by text.
pub fn mine_rules(
    grid: &ConditionGrid,
    labels: &[usize],
    strata: &RiskStrata,
    params: &MiningParams,
) -> Result<MinedRules> {
    check_mining(grid, labels, strata, params)?;
    let mut result = MinedRules { rules: Vec::new(), notices: grid.notices.clone() };
    let present: HashSet<usize> = labels.iter().copied().collect();
    if present.len() < 2 {
        result.notices.push("all rows fall in one stratum; no rules to mine".into());
        return Ok(result);
    }
    let sets = frequent_sets(grid, params.min_support, params.max_len);
    let n = labels.len() as f64;
    let mut per_stratum: HashMap<usize, Vec<AssociationRule>> = HashMap::new();
    for r in 0..strata.n_strata() {
        let stratum_bits = Bits::from_fn(labels.len(), |i| labels[i] == r);
        let base = stratum_bits.count() as f64 / n;
        if base == 0.0 {
            continue;
        }
        for (set, bits) in &sets {
            let rule = score_rule(grid, set, bits, &stratum_bits, r, strata, base, params)?;
            if rule.p_above_base >= params.min_posterior_confidence {
                per_stratum.entry(r).or_default().push(rule);
            }
        }
    }
    for r in 0..strata.n_strata() {
        let Some(mut rules) = per_stratum.remove(&r) else { continue };
        rank(&mut rules);
        rules.truncate(params.top_k);
        result.rules.extend(rules);
    }
    Ok(result)
}

pub fn rank(rules: &mut [AssociationRule]) {
    rules.sort_by(|x, y| {
        y.posterior_mean
            .total_cmp(&x.posterior_mean)
            .then(x.conditions.len().cmp(&y.conditions.len()))
            .then_with(|| x.key().cmp(&y.key()))
    });
}

fn check_mining(grid: &ConditionGrid, labels: &[usize], strata: &RiskStrata, params: &MiningParams) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InsufficientData("no rows to mine".into()));
    }
    if labels.len() != grid.n_rows() {
        return Err(Error::DimensionMismatch { expected: grid.n_rows(), got: labels.len() });
    }
    if labels.iter().any(|&l| l >= strata.n_strata()) {
        return Err(Error::InvalidArgument("stratum label out of range".into()));
    }
    if params.min_support == 0 {
        return Err(Error::InvalidArgument("min_support must be at least 1".into()));
    }
    if params.max_len == 0 || params.max_len > MAX_RULE_LENGTH {
        return Err(Error::InvalidArgument(format!("max_len must be in 1..={MAX_RULE_LENGTH}")));
    }
    if !(params.a > 0.0 && params.b > 0.0) || params.boosts.values().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("Beta prior parameters must be positive".into()));
    }
    if !(params.credible_level > 0.0 && params.credible_level < 1.0) {
        return Err(Error::InvalidArgument("credible level must lie in (0, 1)".into()));
    }
    Ok(())
}

/// Human-readable rule listing, grouped by stratum.
pub fn render_rules(mined: &MinedRules, strata: &RiskStrata) -> String {
    let mut out = String::new();
    for (r, label) in strata.labels.iter().enumerate() {
        let rules: Vec<&AssociationRule> = mined.rules.iter().filter(|x| x.stratum == r).collect();
        if rules.is_empty() {
            continue;
        }
        out.push_str(&format!("== {label} ==\n"));
        for rule in rules {
            out.push_str(&format!("{rule}\n"));
        }
    }
    for n in &mined.notices {
        out.push_str(&format!("note: {n}\n"));
    }
    out
}
