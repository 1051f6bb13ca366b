//! Checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! "MPTCKPT1"  u32 version  u64 config_len  config (UTF-8 key = value text)
//! u64 count   count × { u32 name_len  name  u32 ndim  ndim × u64  f64 data }
//! u64 FNV-1a hash of every preceding byte
//! ```

use std::path::Path;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

use super::config::Config;
use super::model::Model;
use super::train::build;
use super::{HarnessError, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"MPTCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("offset 0: not a checkpoint (bad magic)")]
    BadMagic,
    #[error("offset 8: unsupported version {found}")]
    Version { found: u32 },
    #[error("offset {offset}: truncated while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("offset {offset}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { offset: usize, stored: u64, computed: u64 },
    #[error("offset {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error("parameters do not match the configured model: {0}")]
    Mismatch(String),
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn encode_checkpoint(config: &Config, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let text = config.render();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.ndim() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let h = fnv1a(&out);
    out.extend_from_slice(&h.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.pos, what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &'static str) -> std::result::Result<usize, CheckpointError> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or(CheckpointError::Truncated { offset: at, what })
    }

    fn text(&mut self, n: usize, what: &'static str) -> std::result::Result<String, CheckpointError> {
        let at = self.pos;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Malformed {
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }
}

/// Parsed container contents, before they are matched against a model.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<RawCheckpoint, CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let n = r.len("config length")?;
    let config_text = r.text(n, "config")?;
    let count = r.len("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = r.text(n, "tensor name")?;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len("extent")?);
        }
        let at = r.pos;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&m| m.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or(CheckpointError::Truncated {
                offset: at,
                what: "tensor data",
            })?;
        let raw = r.take(numel * 8, "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed {
            offset: at,
            msg: e.to_string(),
        })?;
        tensors.push((name, t));
    }
    let body_end = r.pos;
    let stored = r.u64("checksum")?;
    let computed = fnv1a(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum {
            offset: body_end,
            stored,
            computed,
        });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed {
            offset: r.pos,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(RawCheckpoint { config_text, tensors })
}

/// Rebuilds the model from the stored config and overwrites every
/// parameter with the stored values.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(Config, Model, ParamStore)> {
    let raw = decode_checkpoint(bytes)?;
    let config = Config::parse(&raw.config_text)?;
    let (model, mut store) = build(&config)?;
    if raw.tensors.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} stored tensors, model has {}",
            raw.tensors.len(),
            store.len()
        ))
        .into());
    }
    for (name, t) in raw.tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor `{name}`")))?;
        if store.get(id).shape() != t.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            ))
            .into());
        }
        store.set(id, t)?;
    }
    Ok((config, model, store))
}

pub fn save_checkpoint_file(path: &Path, config: &Config, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(config, store)).map_err(|e| HarnessError::io(path, e))
}

pub fn load_checkpoint_file(path: &Path) -> Result<(Config, Model, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    load_checkpoint(&bytes)
}
