//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "SALCKPT\0"
//! version    u32       FORMAT_VERSION
//! config     u32 length + UTF-8 JSON of the ModelConfig
//! count      u32       number of parameter tensors
//! per tensor:
//!   name     u32 length + UTF-8
//!   ndim     u32, then ndim × u64 dimensions
//!   data     product(dims) × f64
//! ```
//!
//! Tensors appear in the model's declaration order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::Real;

pub const MAGIC: &[u8; 8] = b"SALCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes<S: Real>(model: &Model<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    put_blob(&mut out, &config);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_blob(&mut out, name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("file ends inside {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self, what: &str) -> Result<&'a [u8]> {
        let len = self.u32(what)? as usize;
        self.take(len, what)
    }
}

pub fn from_bytes<S: Real>(bytes: &[u8]) -> Result<Model<S>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic").map_err(|_| Error::VersionMismatch("missing magic bytes".into()))?;
    if magic != MAGIC {
        return Err(Error::VersionMismatch(format!("bad magic bytes {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "file has format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let config: ModelConfig = serde_json::from_slice(r.blob("config")?)
        .map_err(|e| Error::Truncated(format!("config is not valid JSON: {e}")))?;
    let mut model = build_model::<S>(&config, 0).map_err(|e| Error::ConfigIncompatible(e.to_string()))?;

    let count = r.u32("parameter count")? as usize;
    if count != model.params().len() {
        return Err(Error::ConfigIncompatible(format!(
            "file holds {count} tensors, config declares {}",
            model.params().len()
        )));
    }
    let names = model.params().names().to_vec();
    for (i, expected) in names.iter().enumerate() {
        let name = std::str::from_utf8(r.blob("parameter name")?)
            .map_err(|_| Error::Truncated("parameter name is not UTF-8".into()))?;
        if name != expected {
            return Err(Error::ConfigIncompatible(format!("tensor {i} is {name:?}, expected {expected:?}")));
        }
        let ndim = r.u32("tensor rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64("tensor shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let target = &mut model.params_mut().tensors_mut()[i];
        if shape != target.shape() {
            return Err(Error::ConfigIncompatible(format!(
                "{name} has shape {shape:?}, expected {:?}",
                target.shape()
            )));
        }
        let raw = r.take(8 * target.numel(), "tensor data")?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = S::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Truncated(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint<S: Real>(model: &Model<S>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Real>(path: &Path) -> Result<Model<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and insists that it was produced for `expected`.
pub fn load_checkpoint_for<S: Real>(path: &Path, expected: &ModelConfig) -> Result<Model<S>> {
    let model = load_checkpoint::<S>(path)?;
    if model.config() != expected {
        return Err(Error::ConfigIncompatible(format!(
            "checkpoint was written for variant {} ({:?}), expected variant {} ({:?})",
            model.config().variant,
            model.config().input_size,
            expected.variant,
            expected.input_size
        )));
    }
    Ok(model)
}
