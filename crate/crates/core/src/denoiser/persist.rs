//! Weight files: a JSON manifest (architecture, tensor names, shapes, byte
//! offsets) next to a blob of little-endian `f32` values in manifest order.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{init_params, AdamConfig, DenoiserConfig, DenoiserError, DenoiserParams, OptimizerState, Scalar};

const WEIGHTS_FORMAT: &str = "sewercast-denoiser-weights";
const OPTIMIZER_FORMAT: &str = "sewercast-adam-state";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format: String,
    pub version: u32,
    pub config: DenoiserConfig,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    /// Present on optimizer-state manifests only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub adam: AdamConfig,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn encode<S: Scalar>(tensors: &[(String, &Array2<S>)]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut bytes = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: bytes.len(),
        });
        for v in t.iter() {
            bytes.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
        }
    }
    (entries, bytes)
}

fn decode_into<S: Scalar>(
    entries: &[TensorEntry],
    bytes: &[u8],
    targets: Vec<(String, &mut Array2<S>)>,
) -> Result<(), DenoiserError> {
    if entries.len() != targets.len() {
        return Err(DenoiserError::Format(format!(
            "manifest lists {} tensors, architecture has {}",
            entries.len(),
            targets.len()
        )));
    }
    for (entry, (name, t)) in entries.iter().zip(targets) {
        if entry.name != name || entry.shape != t.shape() || entry.dtype != "f32" {
            return Err(DenoiserError::Format(format!(
                "tensor {} {:?} ({}) does not match expected {name} {:?}",
                entry.name,
                entry.shape,
                entry.dtype,
                t.shape()
            )));
        }
        let end = entry.offset + 4 * t.len();
        let chunk = bytes.get(entry.offset..end).ok_or_else(|| {
            DenoiserError::Format(format!("blob too short for tensor {}", entry.name))
        })?;
        for (dst, raw) in t.iter_mut().zip(chunk.chunks_exact(4)) {
            let v = f32::from_le_bytes(raw.try_into().unwrap());
            *dst = S::from_f32(v).unwrap();
        }
    }
    Ok(())
}

fn write_pair(
    path: &Path,
    manifest: &WeightsManifest,
    bytes: &[u8],
) -> Result<(), DenoiserError> {
    std::fs::write(blob_path(path), bytes)?;
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_pair(path: &Path, format: &str) -> Result<(WeightsManifest, Vec<u8>), DenoiserError> {
    let manifest: WeightsManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if manifest.format != format || manifest.version != 1 {
        return Err(DenoiserError::Format(format!(
            "unexpected format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = std::fs::read(blob)?;
    Ok((manifest, bytes))
}

/// Writes `path` (manifest) and the blob alongside it with extension `.bin`.
pub fn save_weights<S: Scalar>(params: &DenoiserParams<S>, path: &Path) -> Result<(), DenoiserError> {
    let (tensors, bytes) = encode(&params.tensors());
    let manifest = WeightsManifest {
        format: WEIGHTS_FORMAT.into(),
        version: 1,
        config: params.config.clone(),
        blob: blob_name(path),
        tensors,
        optimizer: None,
    };
    write_pair(path, &manifest, &bytes)
}

fn blob_name(path: &Path) -> String {
    blob_path(path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_weights<S: Scalar>(path: &Path) -> Result<DenoiserParams<S>, DenoiserError> {
    let (manifest, bytes) = read_pair(path, WEIGHTS_FORMAT)?;
    let mut params = init_params::<S>(&manifest.config, 0)?;
    decode_into(&manifest.tensors, &bytes, params.tensors_mut())?;
    Ok(params)
}

pub fn save_optimizer<S: Scalar>(state: &OptimizerState<S>, path: &Path) -> Result<(), DenoiserError> {
    let mut named: Vec<(String, &Array2<S>)> = Vec::new();
    for (n, t) in state.first_moment.tensors() {
        named.push((format!("m.{n}"), t));
    }
    for (n, t) in state.second_moment.tensors() {
        named.push((format!("v.{n}"), t));
    }
    let (tensors, bytes) = encode(&named);
    let manifest = WeightsManifest {
        format: OPTIMIZER_FORMAT.into(),
        version: 1,
        config: state.first_moment.config.clone(),
        blob: blob_name(path),
        tensors,
        optimizer: Some(OptimizerMeta {
            step: state.step,
            adam: state.config,
        }),
    };
    write_pair(path, &manifest, &bytes)
}

pub fn load_optimizer<S: Scalar>(path: &Path) -> Result<OptimizerState<S>, DenoiserError> {
    let (manifest, bytes) = read_pair(path, OPTIMIZER_FORMAT)?;
    let meta = manifest
        .optimizer
        .clone()
        .ok_or_else(|| DenoiserError::Format("missing optimizer metadata".into()))?;
    let template = init_params::<S>(&manifest.config, 0)?;
    let mut state = OptimizerState::new(&template, meta.adam);
    state.step = meta.step;
    let mut targets: Vec<(String, &mut Array2<S>)> = Vec::new();
    for (n, t) in state.first_moment.tensors_mut() {
        targets.push((format!("m.{n}"), t));
    }
    for (n, t) in state.second_moment.tensors_mut() {
        targets.push((format!("v.{n}"), t));
    }
    decode_into(&manifest.tensors, &bytes, targets)?;
    Ok(state)
}
