//! Binary classification metrics: ROC AUC, Youden-index thresholding, and
//! precision/recall/F1 at a threshold.
//!
//! AUC uses the Mann-Whitney formulation (ties credit 0.5), which equals
//! the trapezoidal area under the ROC curve. The decision rule everywhere
//! is `score >= threshold` predicts positive. Thresholds are intended to be
//! selected on validation data and applied unchanged to test data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("labels must be 0 or 1")]
    BadLabel,
    #[error("need at least one positive and one negative sample")]
    OneClassOnly,
    #[error("scores must be finite")]
    NonFiniteScore,
}

/// Paired scores and 0/1 labels.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(MetricsError::BadLabel);
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MetricsError::NonFiniteScore);
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed via average ranks in O(n log n).
pub fn roc_auc(set: &ScoredSet) -> Result<f64, MetricsError> {
    let (n_pos, n_neg) = set.class_counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].partial_cmp(&set.scores[b]).expect("finite scores"));

    // Sum of positive ranks with tied groups sharing their average rank.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if set.labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Youden's J at a threshold: TPR - FPR under `score >= threshold`.
pub fn youden_j(set: &ScoredSet, threshold: f64) -> Result<f64, MetricsError> {
    let (n_pos, n_neg) = set.class_counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let (tpr, fpr) = rates_at(set, threshold);
    Ok(tpr - fpr)
}

fn rates_at(set: &ScoredSet, threshold: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        if l == 1 {
            pos += 1;
            if s >= threshold {
                tp += 1;
            }
        } else {
            neg += 1;
            if s >= threshold {
                fp += 1;
            }
        }
    }
    (tp as f64 / pos as f64, fp as f64 / neg as f64)
}

/// Threshold maximizing Youden's J over midpoints between consecutive
/// distinct scores plus the two infinite sentinels.
///
/// Ties in J are broken toward the candidate with the most balanced
/// TPR/(1-FPR) (smallest |TPR + FPR - 1|), then toward the smaller
/// threshold.
pub fn youden_threshold(set: &ScoredSet) -> Result<f64, MetricsError> {
    let (n_pos, n_neg) = set.class_counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let mut distinct: Vec<f64> = set.scores.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    distinct.dedup();

    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    for w in distinct.windows(2) {
        candidates.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    candidates.push(f64::INFINITY);

    let mut best: Option<(f64, f64, f64)> = None; // (j, balance_dist, threshold)
    for &t in &candidates {
        let (tpr, fpr) = rates_at(set, t);
        let j = tpr - fpr;
        let balance = (tpr + fpr - 1.0).abs();
        let replace = match best {
            None => true,
            Some((bj, bbal, bt)) => {
                j > bj + 1e-12
                    || ((j - bj).abs() <= 1e-12
                        && (balance < bbal - 1e-12
                            || ((balance - bbal).abs() <= 1e-12 && t < bt)))
            }
        };
        if replace {
            best = Some((j, balance, t));
        }
    }
    Ok(best.expect("candidate list is never empty").2)
}

/// Confusion counts and derived metrics under `score >= threshold`.
///
/// Precision is defined as 0 when nothing is predicted positive, and F1 as
/// 0 when precision + recall is 0.
pub fn prf1(set: &ScoredSet, threshold: f64) -> Result<MetricsReport, MetricsError> {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = f1_from_pr(precision, recall);
    let auc = roc_auc(set).unwrap_or(f64::NAN);
    Ok(MetricsReport { auc, threshold, precision, recall, f1, tp, fp, tn, fn_ })
}

/// `2PR / (P + R)`, 0 when both are 0.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}
