use std::path::Path;

use crate::dataio::container::{load_arrays, read_json, save_arrays, write_json};
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};

pub const MODEL_FILE: &str = "model.json";

/// Writes parameter arrays (named as in the model) plus `model.json`.
pub fn save_checkpoint(dir: &Path, params: &ModelParams) -> Result<()> {
    let arrays: Vec<(&str, &crate::diffcore::Tensor)> = params
        .names()
        .iter()
        .map(String::as_str)
        .zip(params.tensors())
        .collect();
    save_arrays(dir, &arrays)?;
    write_json(&dir.join(MODEL_FILE), params.config())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    let config: ModelConfig = read_json(&dir.join(MODEL_FILE))?;
    let arrays = load_arrays(dir)?;
    ModelParams::from_named(config, arrays.into_iter().collect())
}
