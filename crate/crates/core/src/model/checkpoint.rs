//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CPNMTCK\0" | version u32 | header_len u32 | header (UTF-8 key=value lines)
//! tensor_count u32 | per tensor: name_len u32, name, rows u32, cols u32, rows*cols f32
//! ```
//!
//! The header carries the [`ModelConfig`] plus free-form metadata such as the
//! tokenizer variant and vocabularies.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::params::ParamStore;
use super::tensor::{Matrix, Scalar};
use super::{ModelConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"CPNMTCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Model configuration, metadata and parameters as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new<F: Scalar>(config: ModelConfig, metadata: BTreeMap<String, String>, params: &ParamStore<F>) -> Self {
        Checkpoint { config, metadata, params: params.cast() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut header = self.config.to_text();
        for (k, v) in &self.metadata {
            if ModelConfig::is_key(k) || k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(CheckpointError::Format(format!("metadata key {k:?} cannot be stored")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        Ok(write_container(&header, &self.params))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (header, params) = read_container(bytes)?;
        let mut config = ModelConfig::default();
        let mut metadata = BTreeMap::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Format(format!("header line {line:?}")))?;
            if ModelConfig::is_key(k) {
                config.set(k, v)?;
            } else {
                metadata.insert(k.to_string(), v.to_string());
            }
        }
        config.validate()?;
        Ok(Checkpoint { config, metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Serialise a text header and tensors into the container format.
pub fn write_container<F: Scalar>(header: &str, params: &ParamStore<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + header.len() + params.size() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for x in &t.data {
            out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn text(&mut self, n: usize) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Format("header is not UTF-8".into()))
    }
}

/// Parse a container into its header text and tensors.
pub fn read_container(bytes: &[u8]) -> Result<(String, ParamStore<f32>), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header = r.text(header_len)?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.text(name_len)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| CheckpointError::Format("tensor too large".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        params.push(name, Matrix::from_vec(rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, params))
}
