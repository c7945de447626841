//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Index of the leaf with the largest error.
    pub worst_leaf: usize,
    /// Error per leaf, in the order the leaves were passed.
    pub per_leaf: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Normwise relative error between two gradient buffers:
/// `max|a - n| / max(max|a|, max|n|)`, and 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares `backward()` against `(f(x+eps) - f(x-eps)) / (2 eps)` for every
/// element of every leaf. `f` must be deterministic and return a scalar.
pub fn check_gradients<F>(f: F, leaves: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, leaves)?;
    let mut per_leaf = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let mut numeric = vec![0.0; leaf.numel()];
        let mut probe: Vec<Tensor> = leaves.to_vec();
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = leaf.data()[k];
            probe[li].data_mut()[k] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe[li].data_mut()[k] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe[li].data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        per_leaf.push(relative_error(analytic[li].data(), &numeric));
    }
    let (worst_leaf, max_rel_err) = per_leaf
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_err,
        worst_leaf,
        per_leaf,
    })
}

/// Gradients of `f` w.r.t. each leaf via one backward sweep.
pub fn analytic_gradients<F>(f: &F, leaves: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<_>>()?;
    let root = f(&tape, &vars)?;
    tape.backward(root)?;
    Ok(vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient"))
        .collect())
}

fn evaluate<F>(f: &F, leaves: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<_>>()?;
    let root = f(&tape, &vars)?;
    Ok(tape.item(root))
}
