//! Checkpoint archive: an 8-byte magic, the JSON manifest length as a
//! little-endian u64, the manifest, then every array as row-major
//! little-endian f64 in manifest order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DecoderKind, InputTransform, Model, ModelConfig, ModelError};
use crate::tape::Tensor;

pub const MAGIC: &[u8; 8] = b"SAWTCKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("bad checkpoint manifest in {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("checkpoint {path} is truncated")]
    Truncated { path: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub layer_widths: Vec<usize>,
    pub embed_dim: usize,
    pub hidden: usize,
    pub variant: DecoderKind,
    pub step: u64,
    pub epoch: usize,
    pub precision: String,
    pub vocab_size: usize,
    pub input_transform: InputTransform,
    pub prior_rate: f64,
    pub arrays: Vec<ArrayEntry>,
}

impl CheckpointManifest {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            layer_widths: self.layer_widths.clone(),
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            variant: self.variant,
            input_transform: self.input_transform,
            prior_rate: self.prior_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub epoch: usize,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode(model: &Model, step: u64, epoch: usize) -> Vec<u8> {
    let cfg = &model.config;
    let manifest = CheckpointManifest {
        layer_widths: cfg.layer_widths.clone(),
        embed_dim: cfg.embed_dim,
        hidden: cfg.hidden,
        variant: cfg.variant,
        step,
        epoch,
        precision: "f64".into(),
        vocab_size: cfg.vocab_size,
        input_transform: cfg.input_transform,
        prior_rate: cfg.prior_rate,
        arrays: model
            .named()
            .map(|(name, t)| ArrayEntry {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for x in p.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, model: &Model, step: u64, epoch: usize) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&encode(model, step, epoch)).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head).map_err(|_| CheckpointError::Truncated {
        path: path.display().to_string(),
    })?;
    let len = parse_head(path, &head)?;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json).map_err(|_| CheckpointError::Truncated {
        path: path.display().to_string(),
    })?;
    parse_manifest(path, &json)
}

fn parse_head(path: &Path, head: &[u8]) -> Result<usize, CheckpointError> {
    if &head[..8] != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.display().to_string(),
        });
    }
    Ok(u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize)
}

fn parse_manifest(path: &Path, json: &[u8]) -> Result<CheckpointManifest, CheckpointError> {
    serde_json::from_slice(json).map_err(|e| CheckpointError::Manifest {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(path, &bytes)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let truncated = || CheckpointError::Truncated {
        path: path.display().to_string(),
    };
    if bytes.len() < 16 {
        return Err(truncated());
    }
    let len = parse_head(path, &bytes[..16])?;
    let body = bytes.get(16..16 + len).ok_or_else(truncated)?;
    let manifest = parse_manifest(path, body)?;
    if manifest.precision != "f64" {
        return Err(CheckpointError::Manifest {
            path: path.display().to_string(),
            message: format!("unsupported precision {:?}", manifest.precision),
        });
    }
    let mut offset = 16 + len;
    let mut named = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let n = entry.rows * entry.cols;
        let raw = bytes.get(offset..offset + 8 * n).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        named.push((entry.name.clone(), Tensor::from_vec(entry.rows, entry.cols, data).map_err(ModelError::from)?));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Manifest {
            path: path.display().to_string(),
            message: format!("{} trailing bytes", bytes.len() - offset),
        });
    }
    let model = Model::from_named(manifest.model_config(), named)?;
    Ok(Checkpoint {
        model,
        step: manifest.step,
        epoch: manifest.epoch,
    })
}
