//! Binary checkpoints: model weights alone, or the full resumable training state.
//!
//! Layout: the 8-byte magic `HASZCKPT`, a little-endian `u64` header length,
//! a JSON header, then every tensor's values as little-endian `f64` in header
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::write_file;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::trainer::{AdamState, TrainState, TrainingLog, UpdateCounters};

pub const MAGIC: &[u8; 8] = b"HASZCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs_done: usize,
    pub updates: UpdateCounters,
    pub log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    /// SHA-256 of the resolved experiment configuration, if known.
    pub config_sha256: Option<String>,
    pub tensors: Vec<TensorEntry>,
    /// Present for training-state checkpoints; tensors then continue with the
    /// first and second Adam moments.
    pub optimizer: Option<OptimizerMeta>,
}

fn encode(header: &Header, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + tensors.iter().map(|t| t.len() * 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(Header, Vec<Tensor>)> {
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
    let probe: serde_json::Value = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
    let found = probe.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(probe).map_err(|e| bad(&format!("header: {e}")))?;
    let mut pos = 16 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad(&format!("truncated payload at {}", entry.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push(Tensor::new(entry.shape.clone(), data).map_err(|e| bad(&e.to_string()))?);
        pos += 8 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((header, tensors))
}

fn entries(names: &[String], tensors: &[&Tensor]) -> Vec<TensorEntry> {
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| TensorEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

fn params_from(model: &ModelConfig, path: &Path, tensors: &[Tensor]) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(model)?;
    let slots = params.tensors_mut();
    if slots.len() > tensors.len() {
        return Err(Error::format(path, "fewer tensors than the model declares"));
    }
    for (slot, t) in slots.into_iter().zip(tensors) {
        if slot.shape() != t.shape() {
            return Err(Error::format(path, format!("tensor shape {:?} where {:?} expected", t.shape(), slot.shape())));
        }
        *slot = t.clone();
    }
    Ok(params)
}

pub fn params_to_bytes(params: &ModelParams, seed: u64, config_sha256: Option<String>) -> Result<Vec<u8>> {
    let tensors = params.tensors();
    let header = Header {
        format_version: FORMAT_VERSION,
        model: params.config.clone(),
        seed,
        config_sha256,
        tensors: entries(&params.names(), &tensors),
        optimizer: None,
    };
    encode(&header, &tensors)
}

pub fn save_params(path: &Path, params: &ModelParams, seed: u64, config_sha256: Option<String>) -> Result<()> {
    write_file(path, &params_to_bytes(params, seed, config_sha256)?)
}

/// Loads model weights from either checkpoint kind.
pub fn load_params(path: &Path) -> Result<(ModelParams, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors) = decode(path, &bytes)?;
    let params = params_from(&header.model, path, &tensors)?;
    Ok((params, header))
}

pub fn state_to_bytes(state: &TrainState, seed: u64, config_sha256: Option<String>) -> Result<Vec<u8>> {
    let mut tensors = state.params.tensors();
    let mut names = state.params.names();
    for (prefix, moments) in [("adam_m", &state.adam.m), ("adam_v", &state.adam.v)] {
        for (n, t) in state.params.names().iter().zip(moments) {
            names.push(format!("{prefix}.{n}"));
            tensors.push(t);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model: state.params.config.clone(),
        seed,
        config_sha256,
        tensors: entries(&names, &tensors),
        optimizer: Some(OptimizerMeta {
            step: state.adam.step,
            beta1: state.adam.beta1,
            beta2: state.adam.beta2,
            epochs_done: state.epochs_done,
            updates: state.updates,
            log: state.log.clone(),
        }),
    };
    encode(&header, &tensors)
}

pub fn save_state(path: &Path, state: &TrainState, seed: u64, config_sha256: Option<String>) -> Result<()> {
    write_file(path, &state_to_bytes(state, seed, config_sha256)?)
}

pub fn load_state(path: &Path) -> Result<(TrainState, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors) = decode(path, &bytes)?;
    let opt = header
        .optimizer
        .clone()
        .ok_or_else(|| Error::format(path, "checkpoint holds weights only, not a training state"))?;
    let params = params_from(&header.model, path, &tensors)?;
    let n = params.tensors().len();
    if tensors.len() != 3 * n {
        return Err(Error::format(path, "training state needs weights and both Adam moments"));
    }
    let adam = AdamState {
        m: tensors[n..2 * n].to_vec(),
        v: tensors[2 * n..].to_vec(),
        step: opt.step,
        beta1: opt.beta1,
        beta2: opt.beta2,
    };
    Ok((
        TrainState {
            params,
            adam,
            epochs_done: opt.epochs_done,
            log: opt.log,
            updates: opt.updates,
        },
        header,
    ))
}
