use crate::dataio::{gather_steps, DatasetBundle, Split, Window};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::Modality;

/// True next-step values, one `[B, N, c]` tensor per modality.
pub fn targets(bundle: &DatasetBundle, windows: &[Window]) -> Vec<Tensor> {
    let steps: Vec<usize> = windows.iter().map(Window::target).collect();
    bundle.obs.iter().map(|o| gather_steps(o, &steps)).collect()
}

/// Predicts the last observed value of each window.
pub fn baseline_persistence(bundle: &DatasetBundle, windows: &[Window]) -> Vec<Tensor> {
    let steps: Vec<usize> = windows.iter().map(Window::last).collect();
    bundle.obs.iter().map(|o| gather_steps(o, &steps)).collect()
}

/// Predicts the training mean of the target's time-of-day slot, per region
/// and channel.
pub fn baseline_historical_average(bundle: &DatasetBundle, windows: &[Window]) -> Result<Vec<Tensor>> {
    let spd = bundle.splits.steps_per_day;
    let train = bundle.splits.range(Split::Train);
    let n = bundle.num_regions();
    let mut out = Vec::new();
    for m in Modality::ALL {
        let x = bundle.obs_of(m);
        let c = m.channels();
        let row = n * c;
        let mut sums = vec![0.0; spd * row];
        let mut counts = vec![0usize; spd];
        for t in train.clone() {
            let slot = t % spd;
            counts[slot] += 1;
            for (s, v) in sums[slot * row..(slot + 1) * row].iter_mut().zip(&x.data()[t * row..(t + 1) * row]) {
                *s += v;
            }
        }
        if let Some(slot) = counts.iter().position(|&k| k == 0) {
            return Err(Error::Validation(format!(
                "training split never covers time-of-day slot {slot}"
            )));
        }
        let mut data = Vec::with_capacity(windows.len() * row);
        for w in windows {
            let slot = w.target() % spd;
            let k = counts[slot] as f64;
            data.extend(sums[slot * row..(slot + 1) * row].iter().map(|s| s / k));
        }
        out.push(Tensor::new(&[windows.len(), n, c], data)?);
    }
    Ok(out)
}
