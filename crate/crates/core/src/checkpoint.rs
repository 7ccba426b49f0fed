//! "VTKF" checkpoint container shared by autoencoder, flow and extractor
//! weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"VTKF" | version: u32 | config_len: u64 | config: UTF-8 JSON
//! repeated until EOF:
//!   name_len: u32 | name: UTF-8 | rank: u32 | dims: rank x u64 | payload: f32 x prod(dims)
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{ensure, Error, Result};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VTKF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config: Value) -> Self {
        Self {
            config,
            tensors: Vec::new(),
        }
    }

    /// Appends every parameter of `store` under `prefix`.
    pub fn push_store<T: Scalar>(&mut self, prefix: &str, store: &ParameterStore<T>) {
        for (name, p) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), p.value.cast()));
        }
    }

    /// Rebuilds a store from all records whose name starts with `prefix`.
    pub fn store<T: Scalar>(&self, prefix: &str) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, t.cast())?;
            }
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = serde_json::to_vec(&self.config)?;
        let mut out = Vec::with_capacity(16 + cfg.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(4)? == MAGIC, Malformed, "bad magic, expected VTKF");
        let version = r.u32()?;
        ensure!(version == VERSION, Malformed, "unsupported checkpoint version {}", version);
        let cfg_len = r.u64()? as usize;
        let config: Value = serde_json::from_slice(r.take(cfg_len)?)?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn kind(&self) -> Option<&str> {
        self.config.get("kind").and_then(Value::as_str)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Malformed("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
