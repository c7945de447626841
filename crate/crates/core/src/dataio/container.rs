//! Portable array container: `meta.json` maps array names to shape and file,
//! and each array lives in its own raw little-endian `f64` file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const ARRAY_DIR: &str = "arrays";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayMeta {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_order: String,
}

impl ArrayMeta {
    fn for_array(name: &str, shape: &[usize]) -> Self {
        ArrayMeta {
            dtype: "f64".into(),
            shape: shape.to_vec(),
            file: format!("{ARRAY_DIR}/{name}.bin"),
            byte_order: "little".into(),
        }
    }
}

/// Writes `t` as raw little-endian bytes.
pub fn write_array(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a raw array and checks its byte length against `shape`.
pub fn read_array(path: &Path, name: &str, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Format {
            file: path.display().to_string(),
            detail: format!(
                "array '{name}' expects {} bytes for shape {shape:?}, found {}",
                n * 8,
                bytes.len()
            ),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

/// Writes every array plus `meta.json` into `dir`.
pub fn save_arrays(dir: &Path, arrays: &[(&str, &Tensor)]) -> Result<()> {
    fs::create_dir_all(dir.join(ARRAY_DIR)).map_err(|e| Error::io(dir, e))?;
    let mut meta = BTreeMap::new();
    for (name, t) in arrays {
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::Validation(format!("invalid array name '{name}'")));
        }
        let m = ArrayMeta::for_array(name, t.shape());
        write_array(&dir.join(&m.file), t)?;
        meta.insert(name.to_string(), m);
    }
    write_json(&dir.join(META_FILE), &meta)
}

/// Loads every array listed in `dir/meta.json`, ordered by name.
pub fn load_arrays(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let meta: BTreeMap<String, ArrayMeta> = read_json(&dir.join(META_FILE))?;
    let mut out = BTreeMap::new();
    for (name, m) in meta {
        if m.dtype != "f64" || m.byte_order != "little" {
            return Err(Error::Format {
                file: dir.join(META_FILE).display().to_string(),
                detail: format!("array '{name}' has unsupported encoding {} / {}", m.dtype, m.byte_order),
            });
        }
        let t = read_array(&dir.join(&m.file), &name, &m.shape)?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        file: path.display().to_string(),
        detail: e.to_string(),
    })?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Format {
        file: path.display().to_string(),
        detail: e.to_string(),
    })
}
