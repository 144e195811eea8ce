//! Versioned checkpoint files.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (model config, step, optimizer counters, tensor directory), the
//! tensor payload as little-endian `f32`, and a SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::train::optim::{AdamW, AdamWConfig};

pub const MAGIC: &[u8; 8] = b"UHDPCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    step: u64,
    adam_t: u64,
    adam_config: AdamWConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: AdamW,
    /// Training steps completed when the file was written.
    pub step: u64,
}

fn err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

fn f32_bytes(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, opt: &AdamW, step: u64, path: &Path) -> Result<()> {
    let mut named: Vec<(String, Tensor)> = Vec::new();
    for (p, var) in model.params().iter() {
        named.push((format!("param/{p}"), var.as_tensor().clone()));
    }
    for (p, t) in &opt.m {
        named.push((format!("adam_m/{p}"), t.clone()));
    }
    for (p, t) in &opt.v {
        named.push((format!("adam_v/{p}"), t.clone()));
    }
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in &named {
        tensors.push(TensorEntry { name: name.clone(), shape: t.dims().to_vec(), offset: payload.len() });
        f32_bytes(t, &mut payload)?;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: model.config().clone(),
        step,
        adam_t: opt.t,
        adam_config: opt.config,
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| err(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(20 + header.len() + payload.len() + DIGEST_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint. When `expected` is given, any config difference is
/// an error listing each differing field.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(err(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(err(path, format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(err(path, "checksum mismatch; the file is corrupt"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| err(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(&body[20..header_end]).map_err(|e| err(path, format!("bad header: {e}")))?;
    let payload = &body[header_end..];

    if let Some(want) = expected {
        let diff = want.diff(&header.model_config);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
    }

    let model = build_model(&header.model_config, DType::F32)?;
    let mut tensors: BTreeMap<&str, Tensor> = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| err(path, format!("tensor `{}` runs past the payload", e.name)))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(&e.name, Tensor::from_vec(data, e.shape.as_slice(), &Device::Cpu)?);
    }

    let mut opt = AdamW::new(header.adam_config);
    opt.t = header.adam_t;
    for (name, t) in &tensors {
        if let Some(p) = name.strip_prefix("adam_m/") {
            opt.m.insert(p.to_string(), t.clone());
        } else if let Some(p) = name.strip_prefix("adam_v/") {
            opt.v.insert(p.to_string(), t.clone());
        } else if name.strip_prefix("param/").is_none() {
            return Err(err(path, format!("unknown tensor `{name}`")));
        }
    }
    let paths: Vec<String> = model.params().paths().map(str::to_string).collect();
    for p in &paths {
        let t = tensors
            .get(format!("param/{p}").as_str())
            .ok_or_else(|| err(path, format!("missing parameter `{p}`")))?;
        model.params().set(p, t)?;
    }
    let stored = tensors.keys().filter(|k| k.starts_with("param/")).count();
    if stored != paths.len() {
        return Err(err(path, format!("{stored} stored parameters, model has {}", paths.len())));
    }
    opt.check_against(model.params())?;
    Ok(Checkpoint { model, opt, step: header.step })
}
