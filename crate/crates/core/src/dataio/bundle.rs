use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{load_arrays, read_array, read_json, save_arrays, write_array, write_json};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{Modality, CONCEPT_LABELS};

pub const SPLITS_FILE: &str = "splits.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
const GROUND_TRUTH_ARRAY: &str = "arrays/ground_truth_A.bin";

/// Which contiguous time block a window comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Half-open step ranges of the three splits plus the daily period.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: [usize; 2],
    pub val: [usize; 2],
    pub test: [usize; 2],
    pub steps_per_day: usize,
}

impl Splits {
    /// 60/20/20 in time order.
    pub fn chronological(t: usize, steps_per_day: usize) -> Self {
        let a = t * 6 / 10;
        let b = t * 8 / 10;
        Splits {
            train: [0, a],
            val: [a, b],
            test: [b, t],
            steps_per_day,
        }
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        let r = match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        };
        r[0]..r[1]
    }

    fn validate(&self, t: usize) -> Result<()> {
        if self.train[0] != 0
            || self.train[1] != self.val[0]
            || self.val[1] != self.test[0]
            || self.test[1] != t
            || self.train[0] > self.train[1]
            || self.val[0] > self.val[1]
            || self.test[0] > self.test[1]
        {
            return Err(Error::Validation(format!(
                "splits {self:?} do not partition [0, {t})"
            )));
        }
        if self.steps_per_day == 0 {
            return Err(Error::Validation("steps_per_day must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthMeta {
    labels: Vec<String>,
    shape: Vec<usize>,
    file: String,
}

/// Conditions, per-modality observations, region graph, splits and (for
/// synthetic data) the true causal graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    /// `[T, N, c_c]`
    pub cond: Tensor,
    /// One `[T, N, c_m]` tensor per [`Modality::ALL`] entry, raw units.
    pub obs: Vec<Tensor>,
    /// `[N, N]`
    pub graph: Tensor,
    pub ground_truth_a: Option<Tensor>,
    pub splits: Splits,
}

impl DatasetBundle {
    pub fn num_steps(&self) -> usize {
        self.cond.shape()[0]
    }

    pub fn num_regions(&self) -> usize {
        self.cond.shape()[1]
    }

    pub fn cond_dim(&self) -> usize {
        self.cond.shape()[2]
    }

    pub fn obs_of(&self, m: Modality) -> &Tensor {
        &self.obs[m.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.cond.shape();
        if s.len() != 3 {
            return Err(Error::Validation(format!("C must be [T, N, c], got {s:?}")));
        }
        let (t, n) = (s[0], s[1]);
        if self.obs.len() != Modality::ALL.len() {
            return Err(Error::Validation("expected four modalities".into()));
        }
        for m in Modality::ALL {
            let o = &self.obs[m.index()];
            if o.shape() != [t, n, m.channels()] {
                return Err(Error::Validation(format!(
                    "{} must be [{t}, {n}, {}], got {:?}",
                    m.name(),
                    m.channels(),
                    o.shape()
                )));
            }
            if !o.is_finite() {
                return Err(Error::Validation(format!("{} contains non-finite values", m.name())));
            }
        }
        if self.graph.shape() != [n, n] {
            return Err(Error::Validation(format!("G must be [{n}, {n}], got {:?}", self.graph.shape())));
        }
        if let Some(a) = &self.ground_truth_a {
            let k = CONCEPT_LABELS.len();
            if a.shape() != [k, k] {
                return Err(Error::Validation(format!("ground truth A must be {k}x{k}")));
            }
        }
        self.splits.validate(t)
    }

    /// Writes `meta.json` with the six data arrays, `splits.json` and, if
    /// present, `ground_truth.json` with its own array file.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let mut arrays: Vec<(&str, &Tensor)> = vec![("C", &self.cond), ("G", &self.graph)];
        for m in Modality::ALL {
            arrays.push((m.name(), &self.obs[m.index()]));
        }
        save_arrays(dir, &arrays)?;
        write_json(&dir.join(SPLITS_FILE), &self.splits)?;
        let gt_path = dir.join(GROUND_TRUTH_FILE);
        match &self.ground_truth_a {
            Some(a) => {
                write_array(&dir.join(GROUND_TRUTH_ARRAY), a)?;
                let meta = GroundTruthMeta {
                    labels: CONCEPT_LABELS.iter().map(|s| s.to_string()).collect(),
                    shape: a.shape().to_vec(),
                    file: GROUND_TRUTH_ARRAY.into(),
                };
                write_json(&gt_path, &meta)?;
            }
            None => {
                if gt_path.exists() {
                    std::fs::remove_file(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut arrays = load_arrays(dir)?;
        let mut take = |name: &str| {
            arrays.remove(name).ok_or_else(|| Error::Format {
                file: dir.join("meta.json").display().to_string(),
                detail: format!("missing array '{name}'"),
            })
        };
        let cond = take("C")?;
        let graph = take("G")?;
        let obs = Modality::ALL
            .iter()
            .map(|m| take(m.name()))
            .collect::<Result<Vec<_>>>()?;
        let splits: Splits = read_json(&dir.join(SPLITS_FILE))?;
        let gt_path = dir.join(GROUND_TRUTH_FILE);
        let ground_truth_a = if gt_path.exists() {
            let meta: GroundTruthMeta = read_json(&gt_path)?;
            if meta.labels != CONCEPT_LABELS {
                return Err(Error::Format {
                    file: gt_path.display().to_string(),
                    detail: format!("unexpected concept labels {:?}", meta.labels),
                });
            }
            Some(read_array(&dir.join(&meta.file), "ground_truth_A", &meta.shape)?)
        } else {
            None
        };
        let bundle = DatasetBundle {
            cond,
            obs,
            graph,
            ground_truth_a,
            splits,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}
