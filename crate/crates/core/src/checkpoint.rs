//! Parameter snapshots: one feature-format blob per named tensor plus a
//! JSON manifest describing the model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_mtdf, write_mtdf};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ModelParams};

pub const CHECKPOINT_FORMAT: &str = "mtda-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
}

// Blobs are matrices: the first axis is kept, the rest are flattened.
fn blob_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [first, rest @ ..] => (*first, rest.iter().product()),
    }
}

/// Writes `params` into `dir` (created if missing). Values are stored as
/// 32-bit floats.
pub fn save_checkpoint(dir: &Path, params: &ModelParams) -> Result<CheckpointManifest> {
    let blobs = dir.join("params");
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    let names = params.network.names();
    let mut entries = Vec::with_capacity(names.len());
    for (name, tensor) in names.into_iter().zip(params.network.tensors()) {
        let file = format!("params/{name}.mtdf");
        let (r, c) = blob_dims(tensor.shape());
        write_mtdf(&dir.join(&file), r, c, tensor.data())?;
        entries.push(ParamEntry {
            name,
            shape: tensor.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: params.config.clone(),
        params: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let mut params = build_model(&manifest.model, 0)?;
    let names = params.network.names();
    if names.len() != manifest.params.len() {
        return Err(Error::Data(format!(
            "{}: model needs {} tensors, manifest lists {}",
            path.display(),
            names.len(),
            manifest.params.len()
        )));
    }
    for ((name, tensor), entry) in names.iter().zip(params.network.tensors_mut()).zip(&manifest.params) {
        if *name != entry.name || tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Data(format!(
                "{}: expected {name} {:?}, found {} {:?}",
                path.display(),
                tensor.shape(),
                entry.name,
                entry.shape
            )));
        }
        let blob = read_mtdf(&dir.join(&entry.file))?;
        if blob.len() != tensor.len() {
            return Err(Error::Dimension {
                op: "load_checkpoint",
                left: entry.shape.clone(),
                right: blob.shape().to_vec(),
            });
        }
        tensor.data_mut().copy_from_slice(blob.data());
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_f32() {
        let cfg = ModelConfig {
            num_stages: 2,
            layers_per_stage: 2,
            num_filters: 4,
            input_dim: 3,
            num_classes: 2,
            da_stages: vec![2],
            domain_hidden_dim: 3,
            ..ModelConfig::default()
        };
        let params = build_model(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_checkpoint(dir.path(), &params).unwrap();
        assert_eq!(manifest.params.len(), params.network.tensors().len());
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.config, cfg);
        for (a, b) in params.network.tensors().iter().zip(back.network.tensors()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn detects_tampered_shapes() {
        let cfg = ModelConfig {
            num_stages: 1,
            layers_per_stage: 1,
            num_filters: 2,
            input_dim: 2,
            num_classes: 2,
            da_stages: vec![],
            ..ModelConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let params = build_model(&cfg, 1).unwrap();
        save_checkpoint(dir.path(), &params).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replacen("\"num_filters\": 2", "\"num_filters\": 3", 1);
        fs::write(&path, text).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
