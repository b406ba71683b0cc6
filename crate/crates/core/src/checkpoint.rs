//! Model checkpoints.
//!
//! Layout, little-endian: magic `RFCK`, u16 version, u32 length + TOML model
//! config, u32 blob count, then per blob: u16 name length, name bytes, u8
//! rank, u32 extents, f32 data.

use std::path::Path;

use radarformer_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::model::{build_model, Model};

pub const MAGIC: &[u8; 4] = b"RFCK";
pub const VERSION: u16 = 1;

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_toml();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CoreError::format(self.file, self.pos as u64, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn err(&self, at: usize, msg: String) -> CoreError {
        CoreError::format(self.file, at as u64, msg)
    }
}

/// Parses a checkpoint image; every parameter of the config's model must be
/// present exactly once with its expected shape.
pub fn decode_checkpoint(bytes: &[u8], file: &Path) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0, file };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err(0, "bad magic".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| r.err(at, "config is not UTF-8".into()))?;
    let config = ModelConfig::from_toml(text).map_err(|e| r.err(at, e.to_string()))?;
    let mut model = build_model::<f32>(&config, 0).map_err(|e| r.err(at, e.to_string()))?;
    let count = r.u32("blob count")? as usize;
    if count != model.params.len() {
        return Err(r.err(r.pos - 4, format!("{count} blobs, model has {} parameters", model.params.len())));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let at = r.pos;
        let n = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?).map_err(|_| r.err(at, "name is not UTF-8".into()))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel, "blob data")?;
        let slot = model.params.get_mut(name).ok_or_else(|| r.err(at, format!("unknown parameter {name}")))?;
        if slot.shape() != shape.as_slice() || !seen.insert(name.to_string()) {
            return Err(r.err(at, format!("parameter {name} shape {shape:?} duplicated or mismatched")));
        }
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        *slot = Tensor::from_vec(&shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| CoreError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
