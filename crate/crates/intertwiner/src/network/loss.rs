use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Mean loss of a batch of outputs against integer labels. MSE targets are
/// one-hot; cross-entropy is computed through a log-sum-exp for stability.
pub fn mean_loss(outputs: &Matrix, labels: &[usize], classes: usize, kind: LossKind) -> Result<f64> {
    if outputs.rows() != labels.len() {
        return Err(Error::shape(
            "mean_loss",
            format!("{} outputs vs {} labels", outputs.rows(), labels.len()),
        ));
    }
    if outputs.cols() != classes {
        return Err(Error::shape(
            "mean_loss",
            format!("{} columns vs {classes} classes", outputs.cols()),
        ));
    }
    let n = outputs.rows();
    let mut total = 0.0;
    for i in 0..n {
        let row = outputs.row(i);
        let y = labels[i];
        if y >= classes {
            return Err(Error::shape("mean_loss", format!("label {y} out of range")));
        }
        total += match kind {
            LossKind::Mse => row
                .iter()
                .enumerate()
                .map(|(c, &o)| {
                    let t = if c == y { 1.0 } else { 0.0 };
                    (o - t) * (o - t)
                })
                .sum::<f64>(),
            LossKind::CrossEntropy => {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&o| (o - max).exp()).sum::<f64>().ln();
                lse - row[y]
            }
        };
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("mean_loss"));
    }
    Ok(loss)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(outputs: &Matrix, labels: &[usize]) -> f64 {
    let n = outputs.rows();
    if n == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    for i in 0..n {
        let row = outputs.row(i);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
