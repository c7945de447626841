use std::fmt::Write as _;
use std::path::Path;

use crate::dataio::{assemble_batch, windows, DatasetBundle, NormalizedData, Normalizer, Split, Window};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graphops::RegionGraph;
use crate::model::{Modality, Mode, ModelParams, Session};
use crate::objective::{total_loss, LossReport};

use super::baselines::targets;
use super::metrics::{metrics, MetricReport};

/// Model forecasts over every window of a split, in raw units.
#[derive(Clone, Debug)]
pub struct SplitForecast {
    pub windows: Vec<Window>,
    /// One `[W, N, c]` tensor per modality.
    pub pred: Vec<Tensor>,
    pub truth: Vec<Tensor>,
    /// Evaluation-mode loss averaged over windows.
    pub loss: LossReport,
    pub metrics: MetricReport,
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Validation("no forecasts".into()))?;
    let tail = &first.shape()[1..];
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    Tensor::new(&shape, data)
}

/// Runs the model in evaluation mode over `split`.
#[allow(clippy::too_many_arguments)]
pub fn forecast_split(
    params: &ModelParams,
    graph: &RegionGraph,
    bundle: &DatasetBundle,
    normalizer: &Normalizer,
    data: &NormalizedData,
    split: Split,
    history: usize,
    batch_size: usize,
    lambda: f64,
    mask_threshold: f64,
) -> Result<SplitForecast> {
    let ws = windows(&bundle.splits, split, history)?;
    let mut preds: Vec<Vec<Tensor>> = vec![Vec::new(); Modality::ALL.len()];
    let mut loss = LossReport::default();
    for chunk in ws.chunks(batch_size.max(1)) {
        let batch = assemble_batch(data, chunk)?;
        let tape = Tape::new();
        let session = Session::new(&tape, params, graph, false)?;
        let out = session.rollout(&batch, &mut Mode::Eval)?;
        let (_, report) = total_loss(&tape, &out, &batch, lambda)?;
        loss.add_weighted(&report, chunk.len() as f64 / ws.len() as f64);
        for m in Modality::ALL {
            let z = tape.value(out.forecast[m.index()]);
            preds[m.index()].push(normalizer.obs[m.index()].denormalize(&z)?);
        }
    }
    let pred = preds.iter().map(|p| concat_rows(p)).collect::<Result<Vec<_>>>()?;
    let truth = targets(bundle, &ws);
    let metrics = metrics(&pred, &truth, mask_threshold)?;
    Ok(SplitForecast {
        windows: ws,
        pred,
        truth,
        loss,
        metrics,
    })
}

/// Plot data: one row per (window target step, region) with truth and
/// prediction for every modality channel.
pub fn forecast_csv(windows: &[Window], pred: &[Tensor], truth: &[Tensor]) -> String {
    let mut out = String::from("step,region");
    for m in Modality::ALL {
        for c in 0..m.channels() {
            let _ = write!(out, ",{0}_{c}_truth,{0}_{c}_pred", m.name());
        }
    }
    out.push('\n');
    let n = truth[0].shape()[1];
    for (b, w) in windows.iter().enumerate() {
        for r in 0..n {
            let _ = write!(out, "{},{r}", w.target());
            for m in Modality::ALL {
                for c in 0..m.channels() {
                    let idx = [b, r, c];
                    let _ = write!(
                        out,
                        ",{},{}",
                        truth[m.index()].at(&idx),
                        pred[m.index()].at(&idx)
                    );
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_forecast_csv(path: &Path, windows: &[Window], pred: &[Tensor], truth: &[Tensor]) -> Result<()> {
    std::fs::write(path, forecast_csv(windows, pred, truth)).map_err(|e| Error::io(path, e))
}
