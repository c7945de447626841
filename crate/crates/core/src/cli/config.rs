use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataio::container::read_json;
use crate::dataio::ScenarioConfig;
use crate::error::{Error, Result};
use crate::optim::TrainConfig;

/// Environment variable that overrides both seeds.
pub const SEED_ENV: &str = "CCHMM_SEED";

/// Everything a run needs besides paths. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
}

fn config_error(source: &str, e: serde_json::Error) -> Error {
    Error::Config(format!("{source}: {e}"))
}

/// Sets `path` (dot separated) inside `root`; every segment must exist.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot set '{path}': '{}' is not a section", segments[..i].join("."))))?;
        let slot = obj
            .get_mut(*seg)
            .ok_or_else(|| Error::Config(format!("unknown config key '{path}'")))?;
        if i + 1 == segments.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one segment")
}

impl CliConfig {
    /// Reads a config file; missing sections and fields take defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw: Value = read_json(path).map_err(|e| Error::Config(e.to_string()))?;
        serde_json::from_value(raw).map_err(|e| config_error(&path.display().to_string(), e))
    }

    /// Applies `key=value` overrides; values parse as JSON, else as strings.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut v = serde_json::to_value(&self).map_err(|e| config_error("config", e))?;
        for o in overrides {
            let (key, val) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let parsed = serde_json::from_str(val).unwrap_or_else(|_| Value::String(val.to_string()));
            set_path(&mut v, key.trim(), parsed)?;
        }
        serde_json::from_value(v).map_err(|e| config_error("override", e))
    }

    /// Applies the seed environment variable, if set.
    pub fn with_env(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got '{s}'")))?;
            self.scenario.seed = seed;
            self.train.seed = seed;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()
    }
}
