//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! magic `EVFCKPT\0`, u32 version, u32-length-prefixed UTF-8 fingerprint,
//! u32-length-prefixed JSON metadata, u32 tensor count, then per tensor a
//! u32-length-prefixed name, u32 rank, u64 dims and f64 values.

use std::io::Read;
use std::path::Path;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EVFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    pub fn new(fingerprint: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self { fingerprint: fingerprint.into(), metadata, tensors: Vec::new() }
    }

    /// Appends every parameter in the store.
    pub fn add_params<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.tensors.push(CheckpointTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|x| x.as_f64()).collect(),
            });
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&CheckpointTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Loads every store parameter whose name starts with `prefix`. Each one
    /// must be present in the checkpoint.
    pub fn restore_params<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        let names: Vec<String> =
            store.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let ct = self
                .tensor(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            store.load_values(&name, &ct.shape, &ct.data)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        put_str(&mut out, &self.metadata.to_string());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| truncated())?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let fingerprint = get_str(&mut r)?;
        let metadata = serde_json::from_str(&get_str(&mut r)?)?;
        let count = get_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let rank = get_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(get_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(truncated());
            }
            let data = r[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            r = &r[n * 8..];
            tensors.push(CheckpointTensor { name, shape, data });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { fingerprint, metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(format!("checkpoint {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn truncated() -> Error {
    Error::Format("truncated checkpoint".into())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > r.len() {
        return Err(truncated());
    }
    let s = std::str::from_utf8(&r[..n]).map_err(|_| Error::Format("non-UTF-8 string in checkpoint".into()))?;
    *r = &r[n..];
    Ok(s.to_string())
}
