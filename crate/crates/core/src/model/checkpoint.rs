//! Single-file checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"PWFCKPT1"
//! 8       8     u64    header length H in bytes
//! 16      H     UTF-8 JSON header
//! 16+H    8*K   f64 parameter data, tensors concatenated in header order
//! ```
//!
//! The header is `{"version":1,"config":{..},"seed":..,"step":..,
//! "tensors":[{"name":..,"shape":[..],"offset":..,"len":..}, ..]}` where
//! `offset`/`len` count `f64` elements from the start of the data block.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PWFCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize.checked_add(hlen).ok_or_else(|| bad("header length overflow"))?;
        if bytes.len() < data_start {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        if header.version != VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let data = &bytes[data_start..];
        if !data.len().is_multiple_of(8) {
            return Err(bad("data block is not a whole number of f64 values"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut params = ParamStore::default();
        for e in header.tensors {
            let end = e.offset.checked_add(e.len).ok_or_else(|| bad("tensor range overflow"))?;
            if end > values.len() {
                return Err(bad(&format!("tensor `{}` runs past the data block", e.name)));
            }
            params.insert(&e.name, Tensor::new(e.shape, values[e.offset..end].to_vec())?);
        }
        Ok(Self {
            config: header.config,
            params,
            seed: header.seed,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
