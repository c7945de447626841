//! Region graph normalization and the graph convolution used in every
//! recurrent gate.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Degree floor that keeps isolated regions well-defined.
pub const DEGREE_FLOOR: f64 = 1e-12;

/// Fixed distance-adjacency graph over regions plus its normalized operator.
#[derive(Clone, Debug)]
pub struct RegionGraph {
    weights: Tensor,
    operator: Tensor,
}

impl RegionGraph {
    pub fn new(weights: Tensor) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Validation(format!(
                "adjacency must be square, got {s:?}"
            )));
        }
        let n = s[0];
        for i in 0..n {
            if weights.at(&[i, i]) != 0.0 {
                return Err(Error::Validation(format!(
                    "adjacency diagonal must be zero, G[{i}][{i}] = {}",
                    weights.at(&[i, i])
                )));
            }
        }
        let operator = normalize_adjacency(&weights)?;
        Ok(RegionGraph { weights, operator })
    }

    /// Graph with no edges; its operator is the identity.
    pub fn isolated(n: usize) -> Self {
        RegionGraph {
            weights: Tensor::zeros(&[n, n]),
            operator: Tensor::eye(n),
        }
    }

    pub fn num_regions(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// `I + D^{-1/2} G D^{-1/2}`
    pub fn operator(&self) -> &Tensor {
        &self.operator
    }
}

/// Returns `I + D^{-1/2} G D^{-1/2}` with `D_ii = max(Σ_j G_ij, 1e-12)`.
pub fn normalize_adjacency(g: &Tensor) -> Result<Tensor> {
    let s = g.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Validation(format!(
            "adjacency must be square, got {s:?}"
        )));
    }
    let n = s[0];
    for i in 0..n {
        for j in 0..n {
            let v = g.at(&[i, j]);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "adjacency entry G[{i}][{j}] = {v} is negative or non-finite"
                )));
            }
            if v != g.at(&[j, i]) {
                return Err(Error::Validation(format!(
                    "adjacency is asymmetric at G[{i}][{j}] = {v} vs G[{j}][{i}] = {}",
                    g.at(&[j, i])
                )));
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = (0..n).map(|j| g.at(&[i, j])).sum();
            1.0 / d.max(DEGREE_FLOOR).sqrt()
        })
        .collect();
    let mut out = Tensor::eye(n);
    for i in 0..n {
        for j in 0..n {
            let v = g.at(&[i, j]) * inv_sqrt_deg[i] * inv_sqrt_deg[j];
            let cur = out.at(&[i, j]);
            out.set(&[i, j], cur + v);
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite {
            op: "normalize_adjacency".into(),
        });
    }
    Ok(out)
}

/// `Ĝ·X·W + b` with `X` shaped `[.., N, f_in]` and `b` repeated over rows.
/// Passing `None` for the operator skips the propagation (identity graph).
pub fn graph_conv(
    tape: &Tape,
    operator: Option<Var>,
    x: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let mixed = match operator {
        Some(g) => tape.matmul(g, x)?,
        None => x,
    };
    let proj = tape.matmul(mixed, w)?;
    tape.add(proj, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_regions_normalize_to_identity() {
        let out = normalize_adjacency(&Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(out, Tensor::eye(2));
    }

    #[test]
    fn two_node_graph_normalizes_to_ones() {
        // D = diag(1,1) and diag(2,2) respectively; dense oracle below.
        for w in [1.0, 2.0] {
            let g = Tensor::from_rows(&[&[0.0, w], &[w, 0.0]]);
            let out = normalize_adjacency(&g).unwrap();
            let d = w;
            let oracle = [1.0, w / d, w / d, 1.0];
            for (a, b) in out.data().iter().zip(oracle) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_asymmetric_and_negative() {
        let asym = Tensor::from_rows(&[&[0.0, 1.0], &[0.5, 0.0]]);
        let err = normalize_adjacency(&asym).unwrap_err().to_string();
        assert!(err.contains("G[0][1]"), "{err}");
        let neg = Tensor::from_rows(&[&[0.0, -1.0], &[-1.0, 0.0]]);
        let err = normalize_adjacency(&neg).unwrap_err().to_string();
        assert!(err.contains("G[0][1]"), "{err}");
    }

    #[test]
    fn region_graph_rejects_self_loops() {
        let g = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(RegionGraph::new(g).is_err());
    }

    #[test]
    fn conv_examples() {
        let tape = Tape::new();
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let xv = tape.constant(x.clone()).unwrap();
        let eye = tape.constant(Tensor::eye(2)).unwrap();
        let zero_b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let out = graph_conv(&tape, Some(eye), xv, eye, zero_b).unwrap();
        assert_eq!(tape.value(out), x);

        let zx = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let b = tape.constant(Tensor::vector(&[0.5, -1.0])).unwrap();
        let out = graph_conv(&tape, Some(eye), zx, eye, b).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 0.5, -1.0]);

        // [[1,1],[1,1]]·[[1],[3]]·[[1]] = [[4],[4]]
        let ones = tape.constant(Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
        let col = tape.constant(Tensor::from_rows(&[&[1.0], &[3.0]])).unwrap();
        let w = tape.constant(Tensor::from_rows(&[&[1.0]])).unwrap();
        let b0 = tape.constant(Tensor::vector(&[0.0])).unwrap();
        let out = graph_conv(&tape, Some(ones), col, w, b0).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, 4.0]);
    }
}
