use super::bundle::{Split, Splits};
use super::normalize::NormalizedData;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{StepInputs, WindowBatch};

/// A history of `len` steps starting at `start`, plus the step after it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

impl Window {
    /// Index of the forecast target.
    pub fn target(&self) -> usize {
        self.start + self.len
    }

    /// Index of the last observed step.
    pub fn last(&self) -> usize {
        self.start + self.len - 1
    }
}

/// Stride-1 windows lying entirely inside one split.
pub fn windows(splits: &Splits, split: Split, history: usize) -> Result<Vec<Window>> {
    if history == 0 {
        return Err(Error::Config("history length must be at least 1".into()));
    }
    let r = splits.range(split);
    if history >= r.len() {
        return Err(Error::Config(format!(
            "history length {history} leaves no window in the {} split of {} steps",
            split.name(),
            r.len()
        )));
    }
    Ok((r.start..r.end - history)
        .map(|start| Window { start, len: history })
        .collect())
}

/// Copies rows `[t, :, :]` of `[T, N, c]` tensors for each window into `[B, N, c]`.
pub fn gather_steps(x: &Tensor, steps: &[usize]) -> Tensor {
    let s = x.shape();
    let row = s[1] * s[2];
    let mut data = Vec::with_capacity(steps.len() * row);
    for &t in steps {
        data.extend_from_slice(&x.data()[t * row..(t + 1) * row]);
    }
    Tensor::new(&[steps.len(), s[1], s[2]], data).expect("gather shape")
}

/// Stacks windows of equal length into a batch ready for the model.
pub fn assemble_batch(data: &NormalizedData, batch: &[Window]) -> Result<WindowBatch> {
    let len = match batch.first() {
        Some(w) => w.len,
        None => return Err(Error::Validation("empty batch".into())),
    };
    if batch.iter().any(|w| w.len != len) {
        return Err(Error::Validation("windows in a batch must share a length".into()));
    }
    let history = (0..len)
        .map(|offset| {
            let steps: Vec<usize> = batch.iter().map(|w| w.start + offset).collect();
            StepInputs {
                cond: gather_steps(&data.cond, &steps),
                obs: data.obs.iter().map(|o| gather_steps(o, &steps)).collect(),
            }
        })
        .collect();
    let targets: Vec<usize> = batch.iter().map(Window::target).collect();
    Ok(WindowBatch {
        history,
        next_cond: gather_steps(&data.cond, &targets),
        next_obs: Some(data.obs.iter().map(|o| gather_steps(o, &targets)).collect()),
    })
}
