//! Scoring metrics and seeded fold assignment.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AucRoc,
    CIndex,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::AucRoc => "auc_roc",
            Metric::CIndex => "c_index",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auc_roc" => Ok(Metric::AucRoc),
            "c_index" => Ok(Metric::CIndex),
            other => Err(Error::InvalidArgument(format!("unknown metric '{other}'"))),
        }
    }
}

/// Area under the ROC curve via average ranks, so tied scores count 1/2.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), got: labels.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Harrell's concordance index. A pair is comparable when the subject with
/// the strictly earlier time had an event; higher risk should come first.
pub fn c_index(risk: &[f64], time: &[f64], event: &[u8]) -> Result<f64> {
    if risk.len() != time.len() {
        return Err(Error::DimensionMismatch { expected: risk.len(), got: time.len() });
    }
    if risk.len() != event.len() {
        return Err(Error::DimensionMismatch { expected: risk.len(), got: event.len() });
    }
    if risk.iter().chain(time).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("risk or time contains NaN".into()));
    }
    let mut comparable = 0u64;
    let mut concordant = 0.0;
    for i in 0..risk.len() {
        if event[i] == 0 {
            continue;
        }
        for j in 0..risk.len() {
            if time[i] < time[j] {
                comparable += 1;
                if risk[i] > risk[j] {
                    concordant += 1.0;
                } else if risk[i] == risk[j] {
                    concordant += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::InvalidArgument("no comparable pairs".into()));
    }
    Ok(concordant / comparable as f64)
}

/// Mean that returns the common value exactly when all inputs are equal.
pub fn exact_mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else { return f64::NAN };
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

/// Seeded fold labels in `0..j`, balanced per class.
pub fn stratified_folds(labels: &[u8], j: usize, seed: u64) -> Result<Vec<usize>> {
    check_folds(labels.len(), j)?;
    let mut r = rng::substream(seed, rng::streams::FOLDS, 0);
    let mut folds = vec![0; labels.len()];
    let mut offset = 0;
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut r);
        for (k, &i) in idx.iter().enumerate() {
            folds[i] = (offset + k) % j;
        }
        offset += idx.len();
    }
    Ok(folds)
}

/// Seeded fold labels in `0..j` with sizes differing by at most one.
pub fn plain_folds(n: usize, j: usize, seed: u64) -> Result<Vec<usize>> {
    check_folds(n, j)?;
    let mut r = rng::substream(seed, rng::streams::FOLDS, 0);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut r);
    let mut folds = vec![0; n];
    for (k, &i) in idx.iter().enumerate() {
        folds[i] = k % j;
    }
    Ok(folds)
}

fn check_folds(n: usize, j: usize) -> Result<()> {
    if j < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    if n < j {
        return Err(Error::InsufficientData(format!("{n} rows cannot fill {j} folds")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [0, 0, 1, 1];
        assert_eq!(pairwise_auc(&s, &l), 0.75);
        assert_eq!(auc_roc(&s, &l).unwrap(), 0.75);
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.3; 4], &l).unwrap(), 0.5);
        assert!(auc_roc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn c_index_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert_eq!(c_index(&neg, &t, &[1, 1, 1, 1]).unwrap(), 1.0);
        assert_eq!(c_index(&[2.0, 1.0], &[1.0, 2.0], &[1, 0]).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0; 4], &t, &[1, 1, 1, 1]).unwrap(), 0.5);
        assert!(c_index(&[1.0, 2.0], &[1.0, 2.0], &[0, 0]).is_err());
    }

    #[test]
    fn exact_mean_of_equal_values() {
        assert_eq!(exact_mean(&[0.1; 3]), 0.1);
        assert_eq!(exact_mean(&[0.7; 5]), 0.7);
        assert!((exact_mean(&[0.2, 0.4]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let labels: Vec<u8> = (0..23).map(|i| (i % 3 == 0) as u8).collect();
        let f = stratified_folds(&labels, 5, 9).unwrap();
        assert_eq!(f, stratified_folds(&labels, 5, 9).unwrap());
        for class in [0u8, 1] {
            let mut sizes = [0usize; 5];
            for (i, &k) in f.iter().enumerate() {
                if labels[i] == class {
                    sizes[k] += 1;
                }
            }
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
        let p = plain_folds(11, 3, 1).unwrap();
        let mut sizes = [0usize; 3];
        p.iter().for_each(|&k| sizes[k] += 1);
        assert_eq!(sizes.iter().sum::<usize>(), 11);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(plain_folds(3, 1, 0).is_err());
    }
}
