use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::Modality;

/// Default MAPE mask: entries with `|y|` below this are skipped.
pub const DEFAULT_MAPE_THRESHOLD: f64 = 1.0;

/// Errors of one modality. `mape` is a percentage and `None` when no entry
/// passes the mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityMetrics {
    pub modality: Modality,
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_modality: Vec<ModalityMetrics>,
    pub mean_mae: f64,
    pub mean_rmse: f64,
    /// Mean over the modalities whose MAPE is defined.
    pub mean_mape: Option<f64>,
}

impl MetricReport {
    pub fn get(&self, m: Modality) -> Option<&ModalityMetrics> {
        self.per_modality.iter().find(|x| x.modality == m)
    }

    pub fn mae(&self, m: Modality) -> f64 {
        self.get(m).map(|x| x.mae).unwrap_or(f64::NAN)
    }
}

/// MAE, RMSE and masked MAPE between two equally sized slices.
pub fn error_stats(pred: &[f64], truth: &[f64], mask_threshold: f64) -> Result<(f64, f64, Option<f64>)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape(
            "metrics",
            format!("{} predictions vs {} targets", pred.len(), truth.len()),
        ));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct, mut kept) = (0.0, 0.0, 0.0, 0usize);
    for (p, y) in pred.iter().zip(truth) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y.abs() >= mask_threshold {
            pct += e.abs() / y.abs();
            kept += 1;
        }
    }
    let mape = (kept > 0).then(|| 100.0 * pct / kept as f64);
    Ok((abs / n, (sq / n).sqrt(), mape))
}

/// Per-modality metrics on denormalized values, one tensor per modality.
pub fn metrics(pred: &[Tensor], truth: &[Tensor], mask_threshold: f64) -> Result<MetricReport> {
    if pred.len() != Modality::ALL.len() || truth.len() != Modality::ALL.len() {
        return Err(Error::shape("metrics", "expected one tensor per modality"));
    }
    let mut per_modality = Vec::new();
    for m in Modality::ALL {
        let (p, y) = (&pred[m.index()], &truth[m.index()]);
        if p.shape() != y.shape() {
            return Err(Error::shape(
                "metrics",
                format!("{}: {:?} vs {:?}", m.name(), p.shape(), y.shape()),
            ));
        }
        let (mae, rmse, mape) = error_stats(p.data(), y.data(), mask_threshold)?;
        per_modality.push(ModalityMetrics {
            modality: m,
            mae,
            rmse,
            mape,
        });
    }
    let k = per_modality.len() as f64;
    let mapes: Vec<f64> = per_modality.iter().filter_map(|x| x.mape).collect();
    Ok(MetricReport {
        mean_mae: per_modality.iter().map(|x| x.mae).sum::<f64>() / k,
        mean_rmse: per_modality.iter().map(|x| x.rmse).sum::<f64>() / k,
        mean_mape: (!mapes.is_empty()).then(|| mapes.iter().sum::<f64>() / mapes.len() as f64),
        per_modality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(error_stats(&[3.0, 4.0], &[3.0, 4.0], 1.0).unwrap(), (0.0, 0.0, Some(0.0)));
        let (mae, rmse, mape) = error_stats(&[1.1, 0.9], &[1.0, 1.0], 1.0).unwrap();
        assert!((mae - 0.1).abs() < 1e-12 && (rmse - 0.1).abs() < 1e-12);
        assert!((mape.unwrap() - 10.0).abs() < 1e-9);
        let (_, _, mape) = error_stats(&[1.0, 2.0], &[0.0, 2.0], 0.5).unwrap();
        assert_eq!(mape, Some(0.0));
        let (_, _, mape) = error_stats(&[1.0], &[0.0], 0.5).unwrap();
        assert_eq!(mape, None);
    }
}
