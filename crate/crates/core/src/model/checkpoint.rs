use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use physe_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "physe-inv-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weights file.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub model: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run information (configuration, normalization statistics).
    pub metadata: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `manifest.json` and `weights.bin` (little-endian f64) into `dir`.
pub fn save_checkpoint(model: &Model, dir: &Path, metadata: serde_json::Value) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut bytes = Vec::with_capacity(model.params().num_values() * 8);
    let mut tensors = Vec::with_capacity(model.params().len());
    for (_, name, t) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f64".into(),
        byte_order: "little-endian".into(),
        model: model.spec().clone(),
        tensors,
        metadata,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(WEIGHTS_FILE), &bytes)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointManifest), CheckpointError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&raw).map_err(|source| CheckpointError::Manifest {
        path: manifest_path.clone(),
        source,
    })?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(CheckpointError::Mismatch(format!(
            "unsupported format {} version {}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != "f64" || manifest.byte_order != "little-endian" {
        return Err(CheckpointError::Mismatch(format!(
            "unsupported encoding {} {}",
            manifest.dtype, manifest.byte_order
        )));
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights_path).map_err(io_err(&weights_path))?;
    let mut model = Model::new(manifest.model.clone(), 0).map_err(CheckpointError::Mismatch)?;
    if manifest.tensors.len() != model.params().len() {
        return Err(CheckpointError::Mismatch(format!(
            "expected {} tensors, found {}",
            model.params().len(),
            manifest.tensors.len()
        )));
    }
    for entry in &manifest.tensors {
        let id = model
            .params()
            .id(&entry.name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor {}", entry.name)))?;
        if model.params().get(id).shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {} has shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                model.params().get(id).shape()
            )));
        }
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + count * 8;
        let slice = bytes
            .get(entry.offset..end)
            .ok_or_else(|| CheckpointError::Mismatch(format!("tensor {} exceeds weights file", entry.name)))?;
        let data = slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        *model.params_mut().get_mut(id) = Tensor::new(&entry.shape, data).expect("shape checked");
    }
    Ok((model, manifest))
}
