//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CRTNETCK"
//! version    u32      1
//! config     u32 byte length, then UTF-8 "key = value\n" lines
//! count      u32      number of records
//! record     u32 name length, UTF-8 name,
//!            u32 ndim, ndim x u64 extents,
//!            product(extents) x f64 raw values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::net::Crtnet;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CRTNETCK";
pub const VERSION: u32 = 1;

/// A decoded checkpoint: an ordered config block and named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Crtnet) -> Self {
        Checkpoint {
            config: model.config.to_kv(),
            records: model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn config_map(&self) -> BTreeMap<String, String> {
        self.config.iter().cloned().collect()
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Rebuilds the model from the `model.*` config keys and every record
    /// that is not under `extra_prefix`.
    pub fn to_model(&self, extra_prefix: &str) -> Result<Crtnet> {
        let config = ModelConfig::from_kv(&self.config_map())?;
        let mut params = ParamStore::new();
        for (name, t) in &self.records {
            if !name.starts_with(extra_prefix) {
                params.insert(name.clone(), t.clone());
            }
        }
        Crtnet::from_parts(config, params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let block: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        out.extend_from_slice(block.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let block = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let mut config = Vec::new();
        for line in block.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("bad config line '{line}'")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("record '{name}': {e}")))?;
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes a model-only checkpoint.
pub fn save_model(model: &Crtnet, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

/// Reads a model, ignoring any optimizer records.
pub fn load_model(path: &Path) -> Result<Crtnet> {
    Checkpoint::load(path)?.to_model(OPTIMIZER_PREFIX)
}

/// Record-name prefix reserved for optimizer state.
pub const OPTIMIZER_PREFIX: &str = "optim.";
