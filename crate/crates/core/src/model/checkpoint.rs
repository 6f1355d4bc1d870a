//! Checkpoints: a JSON manifest next to a flat little-endian binary32 blob of
//! the parameter vector in layer order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelSpec};
use crate::dataset::NormStats;
use crate::error::{Error, Result};

pub const FORMAT: &str = "rfprint-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub layer: String,
    pub tensor: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub alpha_trainable: bool,
    pub param_count: usize,
    pub stored_values: usize,
    pub layer_shapes: Vec<TensorShape>,
    pub norm: NormStats,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_sha256: String,
    /// Free-form provenance (training summary, config hash).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// `model.json` -> `model.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn blob_bytes(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

/// Writes the manifest at `path` and the blob beside it.
pub fn save_checkpoint(model: &Model, path: &Path, metadata: serde_json::Value) -> Result<CheckpointManifest> {
    let blob = blob_bytes(&model.params);
    let blob_file = blob_path(path);
    let alpha_trainable = model
        .spec
        .layers
        .iter()
        .any(|l| matches!(l, super::LayerSpec::Prnn { alpha_trainable: true, .. }));
    let layer_shapes = model
        .spec
        .layers
        .iter()
        .filter_map(|l| l.name().map(|n| (n, l)))
        .flat_map(|(n, l)| {
            l.tensor_shapes().into_iter().map(move |(t, shape)| TensorShape {
                layer: n.to_string(),
                tensor: t.to_string(),
                shape,
            })
        })
        .collect();
    let round = |v: &[f64]| v.iter().map(|x| *x as f32 as f64).collect::<Vec<_>>();
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        spec: model.spec.clone(),
        alpha_trainable,
        param_count: model.param_count(),
        stored_values: model.params.len(),
        layer_shapes,
        norm: NormStats {
            mean: round(&model.norm.mean),
            std: round(&model.norm.std),
        },
        blob: blob_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        metadata,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointManifest)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let manifest: CheckpointManifest = serde_json::from_slice(&text).map_err(|e| format(e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::Checksum(format!(
            "{}: parameter blob does not match the manifest digest",
            blob_file.display()
        )));
    }
    if blob.len() != 4 * manifest.stored_values || manifest.spec.stored_len() != manifest.stored_values {
        return Err(format(format!(
            "blob holds {} values, manifest declares {}",
            blob.len() / 4,
            manifest.stored_values
        )));
    }
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let model = Model::with_params(manifest.spec.clone(), params, manifest.norm.clone())?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PrnnCnnConfig;

    #[test]
    fn round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/model.json");
        let mut model = Model::new(ModelSpec::prnn_cnn(&PrnnCnnConfig::default()).unwrap()).unwrap();
        for (i, p) in model.params.iter_mut().enumerate() {
            *p += (i as f64 * 0.013).sin() * 0.1;
        }
        model.round_to_f32();
        let m = save_checkpoint(&model, &path, serde_json::json!({"note": 1})).unwrap();
        assert_eq!(m.param_count, 6302);
        assert_eq!(m.layer_shapes[0].shape, vec![16, 64]);
        let (back, _) = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);

        let blob = blob_path(&path);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[17] ^= 0x40;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checksum(_))));
    }
}
