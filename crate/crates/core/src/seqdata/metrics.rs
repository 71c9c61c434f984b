use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Percentage of frames whose predicted label equals the truth, pooled over
/// all sequences.
pub fn frame_accuracy(predicted: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::DimensionMismatch {
                expected: t.len(),
                found: p.len(),
            });
        }
        correct += p.iter().zip(t).filter(|(a, b)| a == b).count();
        total += t.len();
    }
    if total == 0 {
        return Err(Error::InvalidInput("no frames to score".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// `matrix[truth][predicted]` frame counts.
pub fn confusion_matrix(
    predicted: &[Vec<usize>],
    truth: &[Vec<usize>],
    labels: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut m = vec![vec![0; labels]; labels];
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::DimensionMismatch {
                expected: t.len(),
                found: p.len(),
            });
        }
        for (&a, &b) in p.iter().zip(t) {
            if a >= labels || b >= labels {
                return Err(Error::InvalidInput(format!("label id outside 0..{labels}")));
            }
            m[b][a] += 1;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Threshold sweep over the distinct score values, highest first. Tied
/// scores enter together, so an uninformative scorer traces the diagonal.
pub fn roc_curve(scores: &[f64], truth: &[bool]) -> Result<Roc> {
    if scores.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("ROC scores"));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidInput(
            "ROC needs both positive and negative frames".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if truth[order[i]] {
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
    Ok(Roc { points, auc })
}
