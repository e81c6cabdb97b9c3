//! Binary-classification metrics. Class 1 is the positive class.
//!
//! Any 0/0 ratio is reported as 0 rather than NaN.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability cut-off used when turning model scores into predictions.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no samples")]
    Empty,
    #[error("value {0} is not a binary label")]
    NonBinary(u8),
    #[error("both classes must be present")]
    SingleClass,
    #[error("score is not finite")]
    NonFiniteScore,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    /// Indexed by class: `[class 0, class 1]`.
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    pub f1_macro: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_binary(values: &[u8]) -> Result<(), MetricsError> {
    match values.iter().find(|&&v| v > 1) {
        Some(&v) => Err(MetricsError::NonBinary(v)),
        None => Ok(()),
    }
}

impl ConfusionMatrix {
    pub fn from_predictions(preds: &[u8], labels: &[u8]) -> Result<Self, MetricsError> {
        if preds.len() != labels.len() {
            return Err(MetricsError::LengthMismatch(preds.len(), labels.len()));
        }
        if preds.is_empty() {
            return Err(MetricsError::Empty);
        }
        check_binary(preds)?;
        check_binary(labels)?;
        let mut cm = ConfusionMatrix::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p, y) {
                (1, 1) => cm.tp += 1,
                (0, 0) => cm.tn += 1,
                (1, 0) => cm.fp += 1,
                _ => cm.fn_ += 1,
            }
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn summarize(&self) -> Result<Summary, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        let precision = [ratio(self.tn, self.tn + self.fn_), ratio(self.tp, self.tp + self.fp)];
        let recall = [ratio(self.tn, self.tn + self.fp), ratio(self.tp, self.tp + self.fn_)];
        // Harmonic mean of precision and recall, taken on the counts so the
        // result is a single correctly rounded ratio.
        let f1 = [
            ratio(2 * self.tn, 2 * self.tn + self.fp + self.fn_),
            ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
        ];
        Ok(Summary {
            accuracy: ratio(self.tp + self.tn, total),
            precision,
            recall,
            f1,
            f1_macro: (f1[0] + f1[1]) / 2.0,
        })
    }
}

/// Shorthand for [`ConfusionMatrix::from_predictions`].
pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionMatrix, MetricsError> {
    ConfusionMatrix::from_predictions(preds, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC curve over descending score thresholds. Equal scores form a single
/// step, so ties contribute a diagonal segment.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    check_binary(labels)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    let positives = labels.iter().filter(|&&y| y == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }

    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Full evaluation of probabilistic predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: u64,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub confusion: ConfusionMatrix,
    /// Absent when the evaluation set holds a single class.
    pub auc: Option<f64>,
    pub roc_points: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Result<Self, MetricsError> {
        let preds: Vec<u8> = scores
            .iter()
            .map(|&s| u8::from(s >= DECISION_THRESHOLD))
            .collect();
        let cm = confusion(&preds, labels)?;
        let summary = cm.summarize()?;
        let (auc, roc_points) = match roc_auc(scores, labels) {
            Ok(curve) => (Some(curve.auc), curve.points),
            Err(MetricsError::SingleClass) => (None, Vec::new()),
            Err(e) => return Err(e),
        };
        Ok(EvalReport {
            samples: cm.total(),
            accuracy: summary.accuracy,
            f1_macro: summary.f1_macro,
            precision: summary.precision,
            recall: summary.recall,
            confusion: cm,
            auc,
            roc_points,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (fpr, tpr) in &self.roc_points {
            let _ = writeln!(out, "{fpr},{tpr}");
        }
        out
    }
}
