//! Training losses: reparameterization, diagonal-Gaussian KL, the negative
//! ELBO, the prediction loss and the acyclicity penalty.
//!
//! Every loss sums over steps, modalities and elements and divides by the
//! number of (window, region) pairs, so scales do not depend on `N` or `B`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{GaussianParams, RolloutOutput, WindowBatch};

/// Default weight of the acyclicity penalty.
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Loss components of one batch, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_nll: f64,
    pub kl_eps: f64,
    pub kl_z: f64,
    pub pred_l2: f64,
    pub acyclicity: f64,
    pub total: f64,
}

impl LossReport {
    /// Accumulates `other` weighted by `w` (used for epoch averages).
    pub fn add_weighted(&mut self, other: &LossReport, w: f64) {
        self.recon_nll += w * other.recon_nll;
        self.kl_eps += w * other.kl_eps;
        self.kl_z += w * other.kl_z;
        self.pred_l2 += w * other.pred_l2;
        self.acyclicity += w * other.acyclicity;
        self.total += w * other.total;
    }
}

/// `mean + exp(0.5·logvar) ⊙ noise`
pub fn reparameterize(tape: &Tape, mean: Var, logvar: Var, noise: Var) -> Result<Var> {
    let std = tape.exp(tape.scale(logvar, 0.5)?)?;
    let shift = tape.mul(std, noise)?;
    tape.add(mean, shift)
}

/// Leading-axis element count that losses are averaged over: every axis
/// before the last one for observations, before the last two for latents.
fn units(shape: &[usize], trailing: usize) -> f64 {
    shape[..shape.len().saturating_sub(trailing)].iter().product::<usize>().max(1) as f64
}

/// `KL(q || p)` per element, summed, divided by the number of regions
/// (times batch) in `q`'s leading axes. Latents are `[.., N, K, d]`.
pub fn gaussian_kl(tape: &Tape, q: GaussianParams, p: GaussianParams) -> Result<Var> {
    let shape = tape.shape(q.mean);
    if shape != tape.shape(p.mean) {
        return Err(Error::shape(
            "gaussian_kl",
            format!("q {shape:?} vs p {:?}", tape.shape(p.mean)),
        ));
    }
    let diff = tape.sub(q.mean, p.mean)?;
    let num = tape.add(tape.exp(q.logvar)?, tape.square(diff)?)?;
    let inv_var_p = tape.exp(tape.neg(p.logvar)?)?;
    let ratio = tape.mul(num, inv_var_p)?;
    let log_ratio = tape.sub(p.logvar, q.logvar)?;
    let inner = tape.add_scalar(tape.add(log_ratio, ratio)?, -1.0)?;
    let total = tape.sum(inner)?;
    tape.scale(total, 0.5 / units(&shape, 2))
}

/// `KL(q || N(0, I))`, used when the model has no prior network.
pub fn standard_normal_kl(tape: &Tape, q: GaussianParams) -> Result<Var> {
    let shape = tape.shape(q.mean);
    let zeros = tape.constant(Tensor::zeros(&shape))?;
    gaussian_kl(
        tape,
        q,
        GaussianParams {
            mean: zeros,
            logvar: zeros,
        },
    )
}

fn squared_error_sum(tape: &Tape, pred: &[Vec<Var>], truth: &[Vec<Var>]) -> Result<Var> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "loss",
            format!("{} predicted steps vs {} targets", pred.len(), truth.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    let mut denom = 1.0;
    for (ps, ts) in pred.iter().zip(truth) {
        if ps.len() != ts.len() {
            return Err(Error::shape("loss", "modality count mismatch"));
        }
        for (&p, &t) in ps.iter().zip(ts) {
            denom = units(&tape.shape(t), 1);
            let se = tape.squared_error(p, t)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, se)?,
                None => se,
            });
        }
    }
    let acc = match acc {
        Some(a) => a,
        None => tape.constant(Tensor::scalar(0.0))?,
    };
    tape.scale(acc, 1.0 / denom)
}

/// `0.5·Σ‖x̂ − x‖²` (unit-variance Gaussian NLL without constants).
/// Outer index is the step, inner the modality.
pub fn recon_loss(tape: &Tape, recon: &[Vec<Var>], truth: &[Vec<Var>]) -> Result<Var> {
    let se = squared_error_sum(tape, recon, truth)?;
    tape.scale(se, 0.5)
}

/// `Σ‖x̂_pred − x‖²` over steps and modalities.
pub fn pred_loss(tape: &Tape, pred: &[Vec<Var>], truth: &[Vec<Var>]) -> Result<Var> {
    squared_error_sum(tape, pred, truth)
}

/// `tr[(I + Ã∘Ã)^K] − K`
pub fn acyclicity(tape: &Tape, a: Var) -> Result<Var> {
    let shape = tape.shape(a);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("acyclicity", format!("expected square matrix, got {shape:?}")));
    }
    let k = shape[0];
    let eye = tape.constant(Tensor::eye(k))?;
    let m = tape.add(eye, tape.square(a)?)?;
    let tr = tape.trace(tape.matrix_power(m, k)?)?;
    tape.add_scalar(tr, -(k as f64))
}

/// Plain-number evaluation of the acyclicity penalty.
pub fn acyclicity_value(a: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.constant(a.clone())?;
    Ok(tape.item(acyclicity(&tape, v)?))
}

/// Full objective `recon + kl_eps + kl_z + pred + λ·h(Ã)` for one rollout.
///
/// Per-step predictions are compared with the observed steps and the
/// forecast with `batch.next_obs` when present.
pub fn total_loss(
    tape: &Tape,
    out: &RolloutOutput,
    batch: &WindowBatch,
    lambda: f64,
) -> Result<(Var, LossReport)> {
    let obs: Vec<Vec<Var>> = batch
        .history
        .iter()
        .map(|s| s.obs.iter().map(|o| tape.constant(o.clone())).collect())
        .collect::<Result<_>>()?;

    let recon = recon_loss(tape, &out.recon, &obs)?;

    let mut pred_seq = out.pred.clone();
    let mut pred_truth = obs.clone();
    if let Some(next) = &batch.next_obs {
        pred_seq.push(out.forecast.clone());
        pred_truth.push(next.iter().map(|o| tape.constant(o.clone())).collect::<Result<_>>()?);
    }
    let pred = pred_loss(tape, &pred_seq, &pred_truth)?;

    let mut kl_eps = tape.constant(Tensor::scalar(0.0))?;
    let mut kl_z = kl_eps;
    for (t, post) in out.posterior.iter().enumerate() {
        let (ke, kz) = match out.prior.get(t) {
            Some(prior) => (
                gaussian_kl(tape, post.eps, prior.eps)?,
                gaussian_kl(tape, post.z, prior.z)?,
            ),
            None => (standard_normal_kl(tape, post.eps)?, standard_normal_kl(tape, post.z)?),
        };
        kl_eps = tape.add(kl_eps, ke)?;
        kl_z = tape.add(kl_z, kz)?;
    }

    let acyc = match out.adjacency {
        Some(a) => acyclicity(tape, a)?,
        None => tape.constant(Tensor::scalar(0.0))?,
    };

    let mut total = tape.add(recon, kl_eps)?;
    total = tape.add(total, kl_z)?;
    total = tape.add(total, pred)?;
    if lambda != 0.0 {
        total = tape.add(total, tape.scale(acyc, lambda)?)?;
    }

    let report = LossReport {
        recon_nll: tape.item(recon),
        kl_eps: tape.item(kl_eps),
        kl_z: tape.item(kl_z),
        pred_l2: tape.item(pred),
        acyclicity: tape.item(acyc),
        total: tape.item(total),
    };
    for (name, v) in [
        ("recon_nll", report.recon_nll),
        ("kl_eps", report.kl_eps),
        ("kl_z", report.kl_z),
        ("pred_l2", report.pred_l2),
        ("acyclicity", report.acyclicity),
        ("total", report.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: format!("loss component {name}"),
            });
        }
    }
    Ok((total, report))
}
