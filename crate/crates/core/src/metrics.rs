//! Classification metrics: accuracy, positive-class and macro F1, ROC AUC
//! (rank statistic) and PR AUC (step-interpolated average precision).
//!
//! Tied scores always form one threshold group, so results never depend on
//! example order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

/// Post-softmax scores for `n` examples over `n_classes` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPredictions {
    pub n_classes: usize,
    /// `[n, n_classes]`
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub positive_class: usize,
}

impl ScoredPredictions {
    pub fn new(n_classes: usize, scores: Vec<f64>, labels: Vec<usize>, positive_class: usize) -> Result<Self> {
        if n_classes < 2 || positive_class >= n_classes {
            return Err(ProbeError::Config(format!(
                "{n_classes} classes with positive class {positive_class}"
            )));
        }
        if labels.is_empty() {
            return Err(ProbeError::EmptySplit("no predictions to score".into()));
        }
        if scores.len() != labels.len() * n_classes {
            return Err(ProbeError::Shape(format!(
                "{} scores for {} examples x {} classes",
                scores.len(),
                labels.len(),
                n_classes
            )));
        }
        for (i, row) in scores.chunks(n_classes).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|v| !v.is_finite()) || (s - 1.0).abs() > 1e-5 {
                return Err(ProbeError::NonFinite(format!(
                    "score row {i} is not a probability vector (sum {s})"
                )));
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(ProbeError::Shape(format!("label {y} out of range")));
        }
        Ok(ScoredPredictions {
            n_classes,
            scores,
            labels,
            positive_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_classes..(i + 1) * self.n_classes]
    }

    /// Argmax class, lowest index on ties.
    pub fn predicted(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        best
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.predicted(i)).collect()
    }

    /// Score of class `c` for every example.
    pub fn class_scores(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.row(i)[c]).collect()
    }
}

pub fn accuracy(p: &ScoredPredictions) -> f64 {
    let correct = (0..p.len()).filter(|&i| p.predicted(i) == p.labels[i]).count();
    correct as f64 / p.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// One-vs-rest precision/recall/F1 of class `c` under argmax decisions.
/// Each ratio is 0 when its denominator is 0.
pub fn class_metrics(p: &ScoredPredictions, c: usize) -> ClassMetrics {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for i in 0..p.len() {
        let (pred, y) = (p.predicted(i) == c, p.labels[i] == c);
        match (pred, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support: tp + fn_,
    }
}

/// F1 of the positive class.
pub fn f1_binary(p: &ScoredPredictions) -> f64 {
    class_metrics(p, p.positive_class).f1
}

pub fn macro_f1(p: &ScoredPredictions) -> f64 {
    (0..p.n_classes).map(|c| class_metrics(p, c).f1).sum::<f64>() / p.n_classes as f64
}

fn sorted_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Average precision: `sum_k (R_k - R_{k-1}) * P_k` over descending distinct
/// score thresholds.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(ProbeError::Shape("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(ProbeError::UndefinedMetric("average precision needs a positive label".into()));
    }
    let order = sorted_desc(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if positive[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// `P(score_pos > score_neg) + P(tie) / 2`.
pub fn roc_auc_scores(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(ProbeError::Shape("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ProbeError::UndefinedMetric("ROC AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // pairs counted in half-units to stay in exact integer arithmetic
    let mut neg_below = 0u64;
    let mut half_pairs = 0u64;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let (mut pos, mut neg) = (0u64, 0u64);
        while k < order.len() && scores[order[k]] == s {
            if positive[order[k]] {
                pos += 1;
            } else {
                neg += 1;
            }
            k += 1;
        }
        half_pairs += pos * (2 * neg_below + neg);
        neg_below += neg;
    }
    Ok(half_pairs as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

fn one_vs_rest<M>(p: &ScoredPredictions, metric: M) -> Result<f64>
where
    M: Fn(&[f64], &[bool]) -> Result<f64>,
{
    if p.n_classes == 2 {
        let c = p.positive_class;
        let pos: Vec<bool> = p.labels.iter().map(|&y| y == c).collect();
        return metric(&p.class_scores(c), &pos);
    }
    let mut total = 0.0;
    for c in 0..p.n_classes {
        let pos: Vec<bool> = p.labels.iter().map(|&y| y == c).collect();
        total += metric(&p.class_scores(c), &pos)?;
    }
    Ok(total / p.n_classes as f64)
}

/// PR AUC of the positive class; macro one-vs-rest for more than two classes.
pub fn pr_auc(p: &ScoredPredictions) -> Result<f64> {
    one_vs_rest(p, average_precision)
}

/// ROC AUC of the positive class; macro one-vs-rest for more than two classes.
pub fn roc_auc(p: &ScoredPredictions) -> Result<f64> {
    one_vs_rest(p, roc_auc_scores)
}

/// Examples sharing a true label and a correctness outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub label: usize,
    pub correct: bool,
    pub indices: Vec<usize>,
}

/// Partitions examples by `(label, correct)`. All `2 * n_classes` groups are
/// returned, possibly empty, ordered by label then correct-before-incorrect.
pub fn stratify(p: &ScoredPredictions) -> Vec<Group> {
    let mut groups: Vec<Group> = (0..p.n_classes)
        .flat_map(|label| {
            [true, false].map(|correct| Group {
                label,
                correct,
                indices: Vec::new(),
            })
        })
        .collect();
    for i in 0..p.len() {
        let y = p.labels[i];
        let correct = p.predicted(i) == y;
        groups[2 * y + usize::from(!correct)].indices.push(i);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Positive-class F1 for binary tasks, macro F1 otherwise.
    pub f1: f64,
    pub accuracy: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub n: usize,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

pub fn report(p: &ScoredPredictions, label_names: &[String]) -> MetricReport {
    let f1 = if p.n_classes == 2 { f1_binary(p) } else { macro_f1(p) };
    let per_class = (0..p.n_classes)
        .map(|c| {
            let name = label_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            (name, class_metrics(p, c))
        })
        .collect();
    MetricReport {
        f1,
        accuracy: accuracy(p),
        roc_auc: roc_auc(p).ok(),
        pr_auc: pr_auc(p).ok(),
        n: p.len(),
        per_class,
    }
}
