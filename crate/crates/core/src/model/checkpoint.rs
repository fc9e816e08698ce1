//! Little-endian checkpoint files.
//!
//! ```text
//! magic     4 bytes  "PMLP"
//! version   u32
//! config    u32 length + UTF-8 JSON of the ModelConfig
//! count     u32
//! records   count x { u32 path length, path bytes, u8 dtype (0 = f32, 1 = f64),
//!                     u32 rank, rank x u64 extents, raw element data }
//! ```
//!
//! Records are written in parameter-store order.

use std::collections::HashSet;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMLP";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER: &str = "<header>";

fn err(path: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_string(),
        reason: reason.into(),
    }
}

pub fn checkpoint_bytes<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let store = model.store();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.path.len() as u32).to_le_bytes());
        out.extend_from_slice(p.path.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
            match T::DTYPE {
                DType::F32 => out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(err(
                ctx,
                format!("truncated file: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().unwrap()))
    }

    fn u64(&mut self, ctx: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, ctx)?.try_into().unwrap()))
    }
}

/// Rebuilds the model described by the embedded config and fills in every
/// parameter. Data stored in the other precision is converted.
pub fn model_from_bytes<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, HEADER)? != CHECKPOINT_MAGIC {
        return Err(err(HEADER, "bad magic bytes"));
    }
    let version = r.u32(HEADER)?;
    if version != CHECKPOINT_VERSION {
        return Err(err(
            HEADER,
            format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let len = r.u32(HEADER)? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len, HEADER)?).map_err(|e| err(HEADER, format!("invalid config: {e}")))?;
    let mut model = Model::<T>::build(config, 0).map_err(|e| err(HEADER, e.to_string()))?;
    let count = r.u32(HEADER)? as usize;
    let mut seen = HashSet::new();
    for _ in 0..count {
        let plen = r.u32(HEADER)? as usize;
        let path = String::from_utf8(r.take(plen, HEADER)?.to_vec())
            .map_err(|_| err(HEADER, "parameter path is not UTF-8"))?;
        let tag = r.take(1, &path)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| err(&path, format!("unknown dtype tag {tag}")))?;
        let rank = r.u32(&path)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64(&path)? as usize);
        }
        let id = model
            .store()
            .id(&path)
            .ok_or_else(|| err(&path, "unknown parameter path"))?;
        if !seen.insert(id) {
            return Err(err(&path, "duplicate record"));
        }
        let expected = model.store().value(id).shape().to_vec();
        if shape != expected {
            return Err(err(
                &path,
                format!("shape {shape:?} does not match model shape {expected:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size_of(), &path)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        *model.store_mut().value_mut(id) = Tensor::new(&shape, data).map_err(|e| err(&path, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(err(HEADER, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if let Some((_, missing)) = model.store().iter().find(|(id, _)| !seen.contains(id)) {
        return Err(err(&missing.path, "parameter missing from checkpoint"));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
