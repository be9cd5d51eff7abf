//! Ranking metrics for binary classification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: labels contain only class {0}")]
    SingleClass(usize),
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("label {label} at index {index} is not 0 or 1")]
    Label { index: usize, label: usize },
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check<T: Scalar>(scores: &[T], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    let mut pos = 0;
    for (index, &label) in labels.iter().enumerate() {
        match label {
            0 => {}
            1 => pos += 1,
            _ => return Err(MetricError::Label { index, label }),
        }
    }
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(MetricError::SingleClass(0));
    }
    if neg == 0 {
        return Err(MetricError::SingleClass(1));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, ties in index order.
fn descending<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    order
}

/// Cumulative `(threshold, tp, fp)` after each group of tied scores, highest first.
fn threshold_steps<T: Scalar>(scores: &[T], labels: &[usize]) -> Vec<(T, usize, usize)> {
    let order = descending(scores);
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        steps.push((s, tp, fp));
    }
    steps
}

/// Average precision: `Σ_k (R_k − R_{k−1}) · P_k` over score thresholds, with
/// tied scores forming a single threshold.
pub fn auprc<T: Scalar>(scores: &[T], labels: &[usize]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    let mut weighted = 0.0;
    let mut prev_tp = 0;
    for (_, tp, fp) in threshold_steps(scores, labels) {
        if tp > prev_tp {
            weighted += (tp - prev_tp) as f64 * tp as f64 / (tp + fp) as f64;
            prev_tp = tp;
        }
    }
    // Rounding can push a perfect ranking a hair above 1.
    Ok((weighted / pos as f64).min(1.0))
}

/// Mann-Whitney AUROC from average ranks: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
pub fn auroc<T: Scalar>(scores: &[T], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[k]] {
            end += 1;
        }
        // Ranks are 1-based; the tie group shares the mean of k+1 ..= end+1.
        let avg = (k + end) as f64 / 2.0 + 1.0;
        for &i in &order[k..=end] {
            if labels[i] == 1 {
                rank_sum += avg;
            }
        }
        k = end + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point of a ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `None` for the initial point that sits above every score.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

/// Precision and recall at every distinct score threshold (`score ≥ threshold`).
pub fn pr_curve<T: Scalar>(scores: &[T], labels: &[usize]) -> Result<Vec<PrPoint>> {
    let (pos, _) = check(scores, labels)?;
    Ok(threshold_steps(scores, labels)
        .into_iter()
        .map(|(s, tp, fp)| PrPoint {
            threshold: s.to_f64_lossy(),
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / pos as f64,
        })
        .collect())
}

/// ROC points from `(0, 0)` through every distinct threshold to `(1, 1)`.
pub fn roc_curve<T: Scalar>(scores: &[T], labels: &[usize]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check(scores, labels)?;
    let mut pts = vec![RocPoint {
        threshold: None,
        fpr: 0.0,
        tpr: 0.0,
    }];
    pts.extend(threshold_steps(scores, labels).into_iter().map(|(s, tp, fp)| RocPoint {
        threshold: Some(s.to_f64_lossy()),
        fpr: fp as f64 / neg as f64,
        tpr: tp as f64 / pos as f64,
    }));
    Ok(pts)
}

/// Expected average precision of a uniformly random ranking of `n` items with
/// `pos` positives.
///
/// The `k`-th positive sits at rank `r`, where it sees `k − 1` positives
/// above it; averaging precision over positives gives
/// `E[AP] = q + (1 − q) · H_n / n` with `q = (pos − 1)/(n − 1)` and `H_n` the
/// harmonic number. It tends to the positive fraction for large `n`.
pub fn random_auprc_expectation(n: usize, pos: usize) -> f64 {
    assert!(pos >= 1 && pos <= n, "need 1 ≤ pos ≤ n");
    if n == 1 {
        return 1.0;
    }
    let q = (pos - 1) as f64 / (n - 1) as f64;
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    q + (1.0 - q) * h / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Mean precision at the rank of each positive; valid for distinct scores.
    fn ap_by_ranks(scores: &[f64], labels: &[usize]) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let (mut hits, mut total) = (0.0, 0.0);
        for (rank, &i) in order.iter().enumerate() {
            if labels[i] == 1 {
                hits += 1.0;
                total += hits / (rank + 1) as f64;
            }
        }
        total / hits
    }

    fn pair_count(scores: &[f64], labels: &[usize]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_and_tied_cases() {
        let s = [0.9, 0.8, 0.3, 0.1];
        let y = [1, 1, 0, 0];
        assert_eq!(auprc(&s, &y).unwrap(), 1.0);
        assert_eq!(auroc(&s, &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &y).unwrap(), 0.5);
        // All tied: one threshold with precision = positive fraction.
        assert_eq!(auprc(&[0.5; 4], &y).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert_eq!(auprc(&[0.1, 0.2], &[0, 0]), Err(MetricError::SingleClass(0)));
        assert_eq!(auroc(&[0.1, 0.2], &[1, 1]), Err(MetricError::SingleClass(1)));
        assert!(matches!(auprc(&[0.1], &[2]), Err(MetricError::Label { .. })));
    }

    #[test]
    fn small_exhaustive_distinct_scores() {
        for n in 2..=8usize {
            let scores: Vec<f64> = (0..n).map(|i| (i as f64 * 1.7).sin()).collect();
            for mask in 1..(1u32 << n) - 1 {
                let y: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
                assert!((auprc(&scores, &y).unwrap() - ap_by_ranks(&scores, &y)).abs() < 1e-12);
                assert!((auroc(&scores, &y).unwrap() - pair_count(&scores, &y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn curves_are_consistent_with_areas() {
        let s = [0.9, 0.7, 0.7, 0.4, 0.2, 0.2];
        let y = [1, 0, 1, 0, 1, 0];
        let roc = roc_curve(&s, &y).unwrap();
        let trapezoid: f64 = roc
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum();
        assert!((trapezoid - auroc(&s, &y).unwrap()).abs() < 1e-12);
        let pr = pr_curve(&s, &y).unwrap();
        assert_eq!(pr.last().unwrap().recall, 1.0);
    }

    #[test]
    fn random_expectation_small_exact() {
        // n = 3, one positive: ranks 1..3 equally likely, E = (1 + 1/2 + 1/3)/3.
        let e = random_auprc_expectation(3, 1);
        assert!((e - (1.0 + 0.5 + 1.0 / 3.0) / 3.0).abs() < 1e-15);
        // Every item positive: AP is always 1.
        assert!((random_auprc_expectation(5, 5) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_maps(
            raw in prop::collection::vec(-3.0f64..3.0, 4..40),
            bits in prop::collection::vec(0usize..2, 40),
        ) {
            let y: Vec<usize> = bits[..raw.len()].to_vec();
            prop_assume!(y.contains(&0) && y.contains(&1));
            let a = auroc(&raw, &y).unwrap();
            let e: Vec<f64> = raw.iter().map(|v| v.exp()).collect();
            let f: Vec<f64> = raw.iter().map(|v| 2.5 * v - 1.0).collect();
            prop_assert!((auroc(&e, &y).unwrap() - a).abs() < 1e-12);
            prop_assert!((auroc(&f, &y).unwrap() - a).abs() < 1e-12);
            let p = auprc(&raw, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
