//! Classification and deferral metrics for binary labels (0 = negative,
//! 1 = positive).
//!
//! Metrics that are undefined on the evaluated samples (a class is missing,
//! or every sample was deferred) return `None` rather than an error.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper false-positive-rate bound of the partial AUC band (90-100% specificity).
pub const PAUC_MAX_FPR: f64 = 0.1;

/// Outcome for one input: a class label or a referral to the expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Class(usize),
    Defer,
}

impl Decision {
    pub fn is_defer(self) -> bool {
        matches!(self, Decision::Defer)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[usize], labels: &[usize]) -> Self {
        let mut c = Self::default();
        for (&p, &y) in predicted.iter().zip(labels) {
            c.add(p, y);
        }
        c
    }

    pub fn add(&mut self, predicted: usize, label: usize) {
        match (label == 1, predicted == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Accuracy on positives (Acc1); `None` without positives.
    pub fn sensitivity(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        (pos > 0).then(|| self.tp as f64 / pos as f64)
    }

    /// Accuracy on negatives (Acc0); `None` without negatives.
    pub fn specificity(&self) -> Option<f64> {
        let neg = self.tn + self.fp;
        (neg > 0).then(|| self.tn as f64 / neg as f64)
    }
}

/// Mean of sensitivity and specificity.
pub fn balanced_accuracy(counts: &ConfusionCounts) -> Option<f64> {
    Some((counts.sensitivity()? + counts.specificity()?) / 2.0)
}

fn class_counts(labels: &[usize]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

/// Mann-Whitney AUC: probability that a random positive outranks a random
/// negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share their average.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum_pos += avg_rank * tied_pos as f64;
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Empirical ROC vertices `(fpr, tpr)` from the highest threshold down; tied
/// scores move along a single diagonal segment.
pub fn roc_points(scores: &[f64], labels: &[usize]) -> Option<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            if labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j;
    }
    Some(points)
}

/// Trapezoidal ROC area over `fpr in [0, max_fpr]`, divided by `max_fpr`.
pub fn pauc_band(scores: &[f64], labels: &[usize], max_fpr: f64) -> Option<f64> {
    let points = roc_points(scores, labels)?;
    let mut area = 0.0;
    for w in points.windows(2) {
        let (f0, t0) = w[0];
        let (f1, t1) = w[1];
        if f0 >= max_fpr {
            break;
        }
        if f1 <= max_fpr {
            area += (f1 - f0) * (t0 + t1) / 2.0;
        } else {
            let t_cut = t0 + (t1 - t0) * (max_fpr - f0) / (f1 - f0);
            area += (max_fpr - f0) * (t0 + t_cut) / 2.0;
        }
    }
    Some(area / max_fpr)
}

/// Partial AUC at 90-100% specificity, normalised so a perfect ranking scores 1.
pub fn pauc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    pauc_band(scores, labels, PAUC_MAX_FPR)
}

/// Deferral statistics for one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub deferral_rate: f64,
    /// Balanced accuracy on the non-deferred samples; `None` when it cannot
    /// be computed (everything deferred or a class missing from the remainder).
    pub bacc: Option<f64>,
    pub positive_deferred_fraction: f64,
    pub acc0: Option<f64>,
    pub acc1: Option<f64>,
    pub deferred: usize,
    pub evaluated: usize,
}

impl CurvePoint {
    pub fn all_deferred(&self) -> bool {
        self.evaluated == 0
    }
}

pub fn deferral_curve_point(decisions: &[Decision], labels: &[usize]) -> Result<CurvePoint> {
    if decisions.is_empty() {
        return Err(Error::Empty("no decisions to evaluate".into()));
    }
    if decisions.len() != labels.len() {
        return Err(Error::InputShape(format!(
            "{} decisions for {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    let mut deferred = 0;
    let mut deferred_pos = 0;
    for (&d, &y) in decisions.iter().zip(labels) {
        match d {
            Decision::Defer => {
                deferred += 1;
                if y == 1 {
                    deferred_pos += 1;
                }
            }
            Decision::Class(c) => counts.add(c, y),
        }
    }
    let total_pos = labels.iter().filter(|&&y| y == 1).count();
    let evaluated = counts.total();
    let (bacc, acc0, acc1) = if evaluated == 0 {
        (None, None, None)
    } else {
        (balanced_accuracy(&counts), counts.specificity(), counts.sensitivity())
    };
    Ok(CurvePoint {
        deferral_rate: deferred as f64 / decisions.len() as f64,
        bacc,
        positive_deferred_fraction: if total_pos == 0 {
            0.0
        } else {
            deferred_pos as f64 / total_pos as f64
        },
        acc0,
        acc1,
        deferred,
        evaluated,
    })
}
