use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::bundle::{DatasetBundle, Split};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Standard deviations below this are floored to keep z-scores finite.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics over the last axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics of `x` `[T, N, c]` over the steps in `steps`.
    pub fn fit(x: &Tensor, steps: Range<usize>, label: &str) -> Result<Self> {
        let s = x.shape();
        if s.len() != 3 || steps.end > s[0] || steps.is_empty() {
            return Err(Error::Validation(format!(
                "cannot fit stats for {label} {s:?} over steps {steps:?}"
            )));
        }
        let (n, c) = (s[1], s[2]);
        let count = (steps.len() * n) as f64;
        let rows = &x.data()[steps.start * n * c..steps.end * n * c];
        let mut mean = vec![0.0; c];
        for row in rows.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for row in rows.chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let std = var
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let sd = (v / count).sqrt();
                if sd < STD_FLOOR {
                    log::warn!("{label} channel {j} is constant on the training split; std floored");
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let c = *x.shape().last().unwrap_or(&0);
        if c != self.channels() {
            return Err(Error::shape(
                "normalize",
                format!("{c} channels vs {} in stats", self.channels()),
            ));
        }
        Ok(c)
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.check(x)?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.check(x)?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = row[j] * self.std[j] + self.mean[j];
            }
        }
        Ok(out)
    }
}

/// Training-split statistics for the conditions and every modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub cond: ChannelStats,
    pub obs: Vec<ChannelStats>,
}

/// Z-scored copy of a bundle's time series.
#[derive(Clone, Debug)]
pub struct NormalizedData {
    pub cond: Tensor,
    pub obs: Vec<Tensor>,
}

impl Normalizer {
    pub fn fit(bundle: &DatasetBundle) -> Result<Self> {
        let train = bundle.splits.range(Split::Train);
        Ok(Normalizer {
            cond: ChannelStats::fit(&bundle.cond, train.clone(), "C")?,
            obs: crate::model::Modality::ALL
                .iter()
                .map(|m| ChannelStats::fit(bundle.obs_of(*m), train.clone(), m.name()))
                .collect::<Result<_>>()?,
        })
    }

    pub fn normalize(&self, bundle: &DatasetBundle) -> Result<NormalizedData> {
        Ok(NormalizedData {
            cond: self.cond.normalize(&bundle.cond)?,
            obs: self
                .obs
                .iter()
                .zip(&bundle.obs)
                .map(|(s, x)| s.normalize(x))
                .collect::<Result<_>>()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::full(&[5, 2, 1], 3.0);
        let s = ChannelStats::fit(&x, 0..5, "x").unwrap();
        assert_eq!(s.std[0], STD_FLOOR);
        assert!(s.normalize(&x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn round_trip_and_zero_mean() {
        let data: Vec<f64> = (0..60).map(|i| ((i * 37 % 11) as f64).sin() * 5.0 + i as f64).collect();
        let x = Tensor::new(&[10, 3, 2], data).unwrap();
        let s = ChannelStats::fit(&x, 0..6, "x").unwrap();
        let z = s.normalize(&x).unwrap();
        let back = s.denormalize(&z).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
        for j in 0..2 {
            let m: f64 = z.data()[..36].iter().skip(j).step_by(2).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-10);
        }
    }
}
