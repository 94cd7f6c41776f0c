//! Binary checkpoint format.
//!
//! ```text
//! "PRNK" | version u32 LE | config length u32 LE | config JSON
//! { name length u32 LE | name | element count u64 LE | f32 LE data }*
//! CRC32 (u32 LE) of everything before it
//! ```
//!
//! Optimizer moments, when present, are stored as extra blobs named
//! `optim.m.<param>` and `optim.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LossConfig, OptimConfig, OptimState};
use crate::canonical::to_canonical_string;
use crate::error::{Error, Result};
use crate::nn::{Param, ParamStore};
use crate::rankhead::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"PRNK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub step: u64,
    pub has_optimizer_state: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: ModelParams,
    pub state: Option<OptimState>,
}

fn push_blob(buf: &mut Vec<u8>, name: &str, data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    buf.reserve(data.len() * 4);
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode(model: &ModelParams, state: Option<&OptimState>, loss: &LossConfig, optim: &OptimConfig) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        loss: *loss,
        optim: optim.clone(),
        step: state.map_or(0, |s| s.step),
        has_optimizer_state: state.is_some(),
    };
    let json = to_canonical_string(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    for p in model.store.iter() {
        push_blob(&mut buf, &p.name, &p.data);
    }
    if let Some(s) = state {
        for (i, p) in model.store.iter().enumerate() {
            if p.trainable {
                push_blob(&mut buf, &format!("optim.m.{}", p.name), &s.m[i]);
                push_blob(&mut buf, &format!("optim.v.{}", p.name), &s.v[i]);
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn checkpoint_save(
    path: &Path,
    model: &ModelParams,
    state: Option<&OptimState>,
    loss: &LossConfig,
    optim: &OptimConfig,
) -> Result<()> {
    let bytes = encode(model, state, loss, optim)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes. Checks run in order: magic, version, structure, checksum.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated("missing version".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("missing config block".into()));
    }
    let body_end = bytes.len() - 4;
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: 8,
    };
    let json_len = r.u32("config length")? as usize;
    let json = r.take(json_len, "config block")?;
    let mut blobs: Vec<(String, Vec<f32>)> = Vec::new();
    while r.pos < body_end {
        let name_len = r.u32("blob name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "blob name")?)
            .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?
            .to_string();
        let count = r.u64("blob length")?;
        let nbytes = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Truncated(format!("blob `{name}` length {count}")))?;
        let raw = r.take(nbytes, &format!("blob `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blobs.push((name, data));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let meta: CheckpointMeta = serde_json::from_slice(json)
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    let template = ModelParams::init(&meta.model, 0)?;
    let mut blobs = blobs.into_iter();
    let mut store = ParamStore::new();
    for want in template.store.iter() {
        let (name, data) = blobs
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", want.name)))?;
        if name != want.name || data.len() != want.len() {
            return Err(Error::Checkpoint(format!(
                "blob `{name}` ({} values) where `{}` ({} values) was expected",
                data.len(),
                want.name,
                want.len()
            )));
        }
        let Param {
            shape,
            trainable,
            row_sparse,
            ..
        } = want.clone();
        store.add(name, shape, data, trainable, row_sparse);
    }
    let model = ModelParams::from_store(&meta.model, store)?;
    let state = if meta.has_optimizer_state {
        let mut m = Vec::with_capacity(model.store.len());
        let mut v = Vec::with_capacity(model.store.len());
        for p in model.store.iter() {
            if !p.trainable {
                m.push(Vec::new());
                v.push(Vec::new());
                continue;
            }
            for (prefix, dst) in [("optim.m.", &mut m), ("optim.v.", &mut v)] {
                let want = format!("{prefix}{}", p.name);
                let (name, data) = blobs
                    .next()
                    .ok_or_else(|| Error::Checkpoint(format!("missing blob `{want}`")))?;
                if name != want || data.len() != p.len() {
                    return Err(Error::Checkpoint(format!("blob `{name}` where `{want}` was expected")));
                }
                dst.push(data);
            }
        }
        Some(OptimState::from_moments(&model.store, meta.step, m, v)?)
    } else {
        None
    };
    if let Some((name, _)) = blobs.next() {
        return Err(Error::Checkpoint(format!("unexpected blob `{name}`")));
    }
    Ok(Checkpoint { meta, model, state })
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
