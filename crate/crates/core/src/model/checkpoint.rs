//! Checkpoints are single safetensors files: trainable parameters as tensors,
//! and a JSON manifest under the `ccl.manifest` metadata key.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};

const MANIFEST_KEY: &str = "ccl.manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub backbone: BackboneConfig,
    /// `(h, w, c)` per stage.
    pub stage_shapes: Vec<(usize, usize, usize)>,
    pub step: usize,
    pub seed: u64,
    pub encoder: String,
    pub encoder_hash: String,
}

impl CheckpointManifest {
    pub fn for_model(model: &Backbone, step: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            config_hash: model.config().config_hash(),
            backbone: model.config().clone(),
            stage_shapes: model.stage_shapes(),
            step,
            seed,
            encoder: model.encoder().identifier().to_string(),
            encoder_hash: model.encoder().parameter_hash()?,
        })
    }
}

pub fn save_checkpoint(model: &Backbone, manifest: &CheckpointManifest, path: &Path) -> Result<()> {
    let params = model.named_parameters();
    let metadata = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(manifest)?)]);
    let bytes = safetensors::serialize(params.iter().map(|(n, t)| (n.as_str(), t)), Some(metadata))
        .map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    manifest_from_bytes(&bytes, path)
}

fn manifest_from_bytes(bytes: &[u8], path: &Path) -> Result<CheckpointManifest> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let (_, meta) =
        safetensors::SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| bad("no manifest in metadata".into()))?;
    Ok(serde_json::from_str(json)?)
}

/// Rebuilds the model recorded in the checkpoint.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(Backbone, CheckpointManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest = manifest_from_bytes(&bytes, path)?;
    let recomputed = manifest.backbone.config_hash();
    if recomputed != manifest.config_hash {
        return Err(Error::ConfigMismatch {
            expected: recomputed,
            found: manifest.config_hash,
        });
    }
    let model = Backbone::new(manifest.backbone.clone(), 0, device)?;
    if model.encoder().parameter_hash()? != manifest.encoder_hash {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("encoder {} does not reproduce the recorded weights", manifest.encoder),
        });
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    model.load_named(&tensors)?;
    Ok((model, manifest))
}

/// Loads a checkpoint and requires it to match `expected`.
pub fn load_checkpoint_for(
    path: &Path,
    expected: &BackboneConfig,
    device: &Device,
) -> Result<(Backbone, CheckpointManifest)> {
    let manifest = read_manifest(path)?;
    let want = expected.config_hash();
    if manifest.config_hash != want {
        return Err(Error::ConfigMismatch {
            expected: want,
            found: manifest.config_hash,
        });
    }
    load_checkpoint(path, device)
}
