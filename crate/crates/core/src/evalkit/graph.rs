use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Edge threshold for F1 and structural Hamming distance.
pub const EDGE_THRESHOLD: f64 = 0.1;

/// How well a learned weighted graph matches the true one. `auc` is `None`
/// when the truth has no edges or no non-edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphRecovery {
    pub auc: Option<f64>,
    pub f1_at_threshold: f64,
    pub structural_hamming: usize,
}

/// Compares off-diagonal entries of `learned` against the nonzero pattern
/// of `truth`.
pub fn graph_recovery(learned: &Tensor, truth: &Tensor) -> Result<GraphRecovery> {
    let k = truth.shape().first().copied().unwrap_or(0);
    if learned.shape() != [k, k] || truth.shape() != [k, k] {
        return Err(Error::shape(
            "graph_recovery",
            format!("{:?} vs {:?}", learned.shape(), truth.shape()),
        ));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let score = learned.at(&[i, j]).abs();
            let is_edge = truth.at(&[i, j]) != 0.0;
            let predicted = score > EDGE_THRESHOLD;
            if is_edge {
                pos.push(score);
            } else {
                neg.push(score);
            }
            match (is_edge, predicted) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
    }
    let auc = if pos.is_empty() || neg.is_empty() {
        None
    } else {
        let mut wins = 0.0;
        for p in &pos {
            for q in &neg {
                wins += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(wins / (pos.len() * neg.len()) as f64)
    };
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    // One unit per unordered pair whose oriented edge set differs, so a
    // reversed edge counts once.
    let mut shd = 0;
    for i in 0..k {
        for j in i + 1..k {
            let est = (learned.at(&[i, j]).abs() > EDGE_THRESHOLD, learned.at(&[j, i]).abs() > EDGE_THRESHOLD);
            let tru = (truth.at(&[i, j]) != 0.0, truth.at(&[j, i]) != 0.0);
            if est != tru {
                shd += 1;
            }
        }
    }
    Ok(GraphRecovery {
        auc,
        f1_at_threshold: f1,
        structural_hamming: shd,
    })
}
