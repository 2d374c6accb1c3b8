//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `MOECKPT\0` |
//! | 4     | `u32` format version |
//! | 8     | `u64` header length `H` |
//! | H     | UTF-8 JSON header |
//! | …     | `f32` payloads, one per header entry, in header order |
//!
//! The header records the full config text, its architecture hash, the
//! step counter and, per tensor, its name, shape, dtype (`"f32"`) and kind
//! (`"weight"` or `"buffer"`). Values are stored as `f32`, so a loaded model
//! holds `f32`-representable values and save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::seq2seq::Model;
use crate::tensor::{ParamKind, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"MOECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    kind: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct Header {
    version: u32,
    config: String,
    arch_hash: String,
    step: u64,
    params: Vec<TensorHeader>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: u64,
    pub model: Model,
}

fn kind_name(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Weight => "weight",
        ParamKind::Buffer => "buffer",
    }
}

/// Serializes `store` with `config` and `step` into bytes.
pub fn encode_checkpoint(config: &ExperimentConfig, step: u64, store: &ParamStore) -> Result<Vec<u8>> {
    let header = Header {
        version: FORMAT_VERSION,
        config: config.to_text(),
        arch_hash: config.arch_hash(),
        step,
        params: store
            .entries()
            .iter()
            .map(|e| TensorHeader {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                dtype: "f32".into(),
                kind: kind_name(e.kind).into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Argument(format!("checkpoint header: {e}")))?;
    let payload: usize = store.entries().iter().map(|e| e.value.numel() * 4).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in store.entries() {
        for &v in e.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, config: &ExperimentConfig, step: u64, store: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode_checkpoint(config, step, store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let hend = usize::try_from(hlen).ok().and_then(|h| h.checked_add(20)).filter(|&e| e <= bytes.len());
    let hend = hend.ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != version {
        return Err(bad("header version disagrees with preamble".into()));
    }
    let config = ExperimentConfig::parse(&header.config).map_err(|e| bad(format!("embedded config: {e}")))?;
    if config.arch_hash() != header.arch_hash {
        return Err(bad("architecture hash does not match the embedded config".into()));
    }

    let mut model = Model::new(&config.model, 0)?;
    if model.store.len() != header.params.len() {
        return Err(bad(format!("expected {} tensors, header lists {}", model.store.len(), header.params.len())));
    }
    let mut pos = hend;
    for (i, th) in header.params.iter().enumerate() {
        let id = model.store.find(&th.name).ok_or_else(|| bad(format!("unknown tensor {}", th.name)))?;
        if id.index() != i {
            return Err(bad(format!("tensor {} out of order", th.name)));
        }
        let entry = model.store.entry(id);
        if th.dtype != "f32" || th.kind != kind_name(entry.kind) || th.shape != entry.value.shape() {
            return Err(bad(format!("tensor {} does not match the model layout", th.name)));
        }
        let n = entry.value.numel() * 4;
        let raw = bytes.get(pos..pos + n).ok_or_else(|| bad(format!("truncated payload in {}", th.name)))?;
        pos += n;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        model.store.set(id, Tensor::new(th.shape.clone(), data)?)?;
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint { config, step: header.step, model })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint whose architecture must match `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ExperimentConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config.arch_hash() != expected.arch_hash() {
        return Err(Error::Config(format!(
            "{}: checkpoint architecture hash {} differs from the config's {}",
            path.display(),
            ckpt.config.arch_hash(),
            expected.arch_hash()
        )));
    }
    Ok(ckpt)
}
