//! Training checkpoints: `<stem>.json` manifest and `<stem>.bin` payload.
//!
//! The payload holds the parameters, then Adam's first moments, then its
//! second moments, each as little-endian `f32` in layout order. The manifest
//! carries shapes, configs, the optimizer step and every rng stream position,
//! so a reloaded state continues bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use ctxssl_core::optim::Adam;
use ctxssl_core::train::{RngSnapshot, TrainConfig, TrainState};
use ctxssl_core::{Dtype, MaskConfig, Mat, Model, ModelConfig, Params};
use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{CliError, Result};
use crate::world_io::{push_f32, read_f32};

const CHECKPOINT_VERSION: u32 = 1;
const SECTIONS: [&str; 3] = ["params", "adam.m", "adam.v"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStreams {
    pub data: RngSnapshot,
    pub mask: RngSnapshot,
    pub init: RngSnapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub dtype: Dtype,
    pub training_hash: String,
    pub world_sha256: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mask: MaskConfig,
    pub sections: Vec<String>,
    pub tensors: Vec<TensorSpec>,
    pub adam_step: u64,
    pub rng: RngStreams,
    pub payload: String,
    pub payload_sha256: String,
}

impl CheckpointManifest {
    pub fn id(&self) -> String {
        format!("step{}-{}", self.step, &self.payload_sha256[..12])
    }
}

/// Where the payload of the manifest at `manifest` lives.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub struct CheckpointMeta<'a> {
    pub training_hash: &'a str,
    pub world_sha256: &'a str,
    pub train: &'a TrainConfig,
    pub mask: &'a MaskConfig,
}

pub fn encode_checkpoint(
    state: &TrainState<f32>,
    meta: &CheckpointMeta<'_>,
    payload_name: &str,
) -> (CheckpointManifest, Vec<u8>) {
    let layout = state.model.layout();
    let mut payload = Vec::new();
    for set in [state.model.params(), &state.adam.m, &state.adam.v] {
        for t in &set.tensors {
            push_f32(&mut payload, &t.data);
        }
    }
    let tensors = layout
        .names()
        .iter()
        .zip(layout.shapes())
        .map(|(n, &(rows, cols))| TensorSpec {
            name: n.clone(),
            rows,
            cols,
        })
        .collect();
    let manifest = CheckpointManifest {
        format: "ctxssl-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        step: state.step,
        dtype: Dtype::F32,
        training_hash: meta.training_hash.to_string(),
        world_sha256: meta.world_sha256.to_string(),
        model: state.model.config().clone(),
        train: meta.train.clone(),
        mask: meta.mask.clone(),
        sections: SECTIONS.iter().map(|s| s.to_string()).collect(),
        tensors,
        adam_step: state.adam.step,
        rng: RngStreams {
            data: RngSnapshot::capture(&state.rng_data),
            mask: RngSnapshot::capture(&state.rng_mask),
            init: RngSnapshot::capture(&state.rng_init),
        },
        payload: payload_name.to_string(),
        payload_sha256: sha256_hex(&payload),
    };
    (manifest, payload)
}

pub fn decode_checkpoint(manifest: &CheckpointManifest, payload: &[u8]) -> Result<TrainState<f32>> {
    let bad = |m: String| CliError::Mismatch(format!("checkpoint: {m}"));
    if manifest.version != CHECKPOINT_VERSION || manifest.dtype != Dtype::F32 {
        return Err(bad("unsupported version or dtype".into()));
    }
    if sha256_hex(payload) != manifest.payload_sha256 {
        return Err(bad("payload checksum".into()));
    }
    let per_set: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
    if payload.len() != 4 * SECTIONS.len() * per_set {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            12 * per_set
        )));
    }
    let values = read_f32(payload);
    let mut off = 0;
    let mut sets = Vec::with_capacity(3);
    for _ in SECTIONS {
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            let n = t.rows * t.cols;
            tensors.push(Mat::from_vec(t.rows, t.cols, values[off..off + n].to_vec()));
            off += n;
        }
        sets.push(Params { tensors });
    }
    let v = sets.pop().unwrap();
    let m = sets.pop().unwrap();
    let params = sets.pop().unwrap();
    let model = Model::from_params(manifest.model.clone(), params)?;
    let expected: Vec<(&String, (usize, usize))> = manifest
        .tensors
        .iter()
        .map(|t| (&t.name, (t.rows, t.cols)))
        .collect();
    let actual: Vec<(&String, (usize, usize))> = model
        .layout()
        .names()
        .iter()
        .zip(model.layout().shapes().iter().copied())
        .collect();
    if expected != actual {
        return Err(bad(
            "tensor names or shapes differ from the model layout".into()
        ));
    }
    let restore = |s: &RngSnapshot| s.restore().ok_or_else(|| bad("bad rng snapshot".into()));
    Ok(TrainState {
        adam: Adam {
            m,
            v,
            step: manifest.adam_step,
        },
        model,
        step: manifest.step,
        rng_data: restore(&manifest.rng.data)?,
        rng_mask: restore(&manifest.rng.mask)?,
        rng_init: restore(&manifest.rng.init)?,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Writes the payload and then the manifest at `manifest_path`.
pub fn save_checkpoint(
    state: &TrainState<f32>,
    meta: &CheckpointMeta<'_>,
    manifest_path: &Path,
) -> Result<CheckpointManifest> {
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let bin = payload_path(manifest_path);
    let name = bin.file_name().unwrap().to_string_lossy().into_owned();
    let (manifest, payload) = encode_checkpoint(state, meta, &name);
    write_atomic(&bin, &payload)?;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(manifest_path, &json)?;
    Ok(manifest)
}

pub fn load_manifest(manifest_path: &Path) -> Result<CheckpointManifest> {
    let text = fs::read(manifest_path).map_err(|e| {
        CliError::Config(format!(
            "cannot read checkpoint {}: {e}",
            manifest_path.display()
        ))
    })?;
    serde_json::from_slice(&text)
        .map_err(|e| CliError::Mismatch(format!("checkpoint manifest: {e}")))
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(CheckpointManifest, TrainState<f32>)> {
    let manifest = load_manifest(manifest_path)?;
    let bin = manifest_path.with_file_name(&manifest.payload);
    let payload = fs::read(&bin)
        .map_err(|e| CliError::Mismatch(format!("checkpoint payload {}: {e}", bin.display())))?;
    let state = decode_checkpoint(&manifest, &payload)?;
    Ok((manifest, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctxssl_core::train::train_step;
    use ctxssl_core::{World, WorldConfig};

    fn trained() -> (World, TrainConfig, MaskConfig, TrainState<f32>) {
        let world = World::new(WorldConfig {
            n_classes: 2,
            objects_per_class: 2,
            prototype_dim: 4,
            obs_dim: 16,
            render_hidden: 8,
            ..WorldConfig::default()
        })
        .unwrap();
        let train = TrainConfig {
            steps: 3,
            batch_sequences: 2,
            k_max: 3,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let base = ModelConfig {
            enc_hidden: 8,
            rep_dim: 4,
            model_dim: 8,
            n_layers: 1,
            n_heads: 2,
            out_dim: 4,
            pred_hidden: 8,
            ..ModelConfig::default()
        };
        let mask = MaskConfig::default();
        let mut state = TrainState::new(train.model_config(&world, &base), 5).unwrap();
        train_step(&mut state, &world, &train, &mask).unwrap();
        (world, train, mask, state)
    }

    #[test]
    fn round_trip_restores_state_and_streams() {
        let (world, train, mask, mut state) = trained();
        let meta = CheckpointMeta {
            training_hash: "h",
            world_sha256: "w",
            train: &train,
            mask: &mask,
        };
        let (manifest, payload) = encode_checkpoint(&state, &meta, "x.bin");
        let mut back = decode_checkpoint(&manifest, &payload).unwrap();
        assert_eq!(back.model.params(), state.model.params());
        assert_eq!(back.adam.m, state.adam.m);
        assert_eq!(back.adam.v, state.adam.v);
        assert_eq!(back.step, 1);
        let a = train_step(&mut state, &world, &train, &mask).unwrap();
        let b = train_step(&mut back, &world, &train, &mask).unwrap();
        assert_eq!(a.loss.total, b.loss.total);
        assert_eq!(back.model.params(), state.model.params());
    }

    #[test]
    fn tampered_payload_is_a_mismatch() {
        let (_, train, mask, state) = trained();
        let meta = CheckpointMeta {
            training_hash: "h",
            world_sha256: "w",
            train: &train,
            mask: &mask,
        };
        let (manifest, mut payload) = encode_checkpoint(&state, &meta, "x.bin");
        payload[0] ^= 0x40;
        assert!(matches!(
            decode_checkpoint(&manifest, &payload),
            Err(CliError::Mismatch(_))
        ));
        let mut short = manifest.clone();
        short.tensors.pop();
        assert!(decode_checkpoint(&short, &payload).is_err());
    }
}
