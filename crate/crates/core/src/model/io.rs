//! Single-file checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SKIPLAB\0"
//! version    u32      FORMAT_VERSION
//! header_len u64      length of the JSON header in bytes
//! header     JSON     config, regime, seed, steps and the tensor manifest
//! data       f64 LE   tensors concatenated in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Regime};
use crate::model::params::{Checkpoint, ModelParams};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 8] = b"SKIPLAB\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    offset: usize,
    numel: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    endianness: String,
    dtype: String,
    config: ModelConfig,
    regime: Regime,
    seed: u64,
    steps_trained: usize,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in self.params().named() {
            entries.push(TensorEntry { name, shape: t.shape().to_vec(), offset, numel: t.numel() });
            offset += t.numel();
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            endianness: "little".into(),
            dtype: "f64".into(),
            config: self.config().clone(),
            regime: self.regime(),
            seed: self.seed(),
            steps_trained: self.steps_trained(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params().tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])?;
        if header.endianness != "little" || header.dtype != "f64" {
            return Err(Error::Format(format!("unsupported encoding {}/{}", header.endianness, header.dtype)));
        }
        let data = &bytes[data_start..];
        let mut named = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let lo = e.offset * 8;
            let hi = lo + e.numel * 8;
            if hi > data.len() {
                return Err(Error::Format(format!("tensor {} runs past end of file", e.name)));
            }
            let values =
                data[lo..hi].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            named.push((e.name, Tensor::new(e.shape, values)?));
        }
        let params = ModelParams::from_named(&header.config, named)?;
        Checkpoint::from_parts(header.config, params, header.regime, header.seed, header.steps_trained)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
