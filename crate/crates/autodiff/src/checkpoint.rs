//! Binary checkpoint container.
//!
//! Layout: `b"CNAV"`, one format-version byte, a little-endian `u32` header
//! length, the UTF-8 JSON header, then the raw little-endian tensor payloads.
//! Header offsets are relative to the first payload byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::real::{DType, Real};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"CNAV";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Default)]
pub struct CheckpointWriter {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
    meta: serde_json::Value,
}

impl CheckpointWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta(mut self, meta: serde_json::Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn add<F: Real>(&mut self, name: impl Into<String>, tensor: &Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(AutodiffError::Checkpoint(format!("duplicate tensor {name}")));
        }
        self.entries.push(TensorEntry {
            name,
            shape: tensor.shape().to_vec(),
            dtype: F::DTYPE,
            offset: self.payload.len(),
        });
        for &v in tensor.data() {
            v.write_le(&mut self.payload);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            tensors: self.entries.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        let len = u32::try_from(header.len())
            .map_err(|_| AutodiffError::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(9 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Writes to a sibling temp file and renames, so readers never observe a
    /// partial checkpoint.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("cnav.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(AutodiffError::Checkpoint("bad magic bytes".into()));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(AutodiffError::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                bytes[4]
            )));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header_end = 9 + len;
        if bytes.len() < header_end {
            return Err(AutodiffError::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[9..header_end])
            .map_err(|e| AutodiffError::Checkpoint(format!("bad header: {e}")))?;
        let payload = bytes[header_end..].to_vec();
        for e in &header.tensors {
            let end = e.offset + numel(&e.shape) * e.dtype.size_bytes();
            if end > payload.len() {
                return Err(AutodiffError::Checkpoint(format!(
                    "tensor {} extends past end of file",
                    e.name
                )));
            }
        }
        Ok(Checkpoint {
            entries: header.tensors,
            payload,
            meta: header.meta,
        })
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.meta
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn tensor<F: Real>(&self, name: &str) -> Result<Tensor<F>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| AutodiffError::Checkpoint(format!("missing tensor {name}")))?;
        if e.dtype != F::DTYPE {
            return Err(AutodiffError::Checkpoint(format!(
                "tensor {name} stored as {:?}, requested {:?}",
                e.dtype,
                F::DTYPE
            )));
        }
        let size = e.dtype.size_bytes();
        let n = numel(&e.shape);
        let data = self.payload[e.offset..e.offset + n * size]
            .chunks_exact(size)
            .map(F::read_le)
            .collect();
        Tensor::new(e.shape.clone(), data)
    }
}
