//! Binary container for named f64 tensors plus a JSON header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "VEILTNSR"
//! 8       4     format version (u32, currently 1)
//! 12      8     header length H in bytes (u64)
//! 20      H     UTF-8 JSON header
//! 20+H    8*N   tensor data, f64 little-endian, concatenated in header order
//! ```
//!
//! The header is `{"kind": str, "meta": any, "tensors": [{"name", "shape",
//! "offset", "len"}]}` where `offset`/`len` count f64 elements from the start
//! of the data block.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamSet};

pub const MAGIC: &[u8; 8] = b"VEILTNSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Param>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `params`, prefixing names with `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for p in params.iter() {
            self.tensors.push(Param {
                name: format!("{prefix}{}", p.name),
                shape: p.shape.clone(),
                data: p.data.clone(),
            });
        }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.push(Param {
            name: name.into(),
            shape,
            data,
        });
    }

    /// Collects, in stored order, the tensors whose names start with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> ParamSet {
        let mut set = ParamSet::new();
        for t in self.tensors.iter().filter(|t| t.name.starts_with(prefix)) {
            set.push(&t.name[prefix.len()..], t.shape.clone(), t.data.clone());
        }
        set
    }

    pub fn tensor(&self, name: &str) -> Option<&Param> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                    len: t.data.len(),
                };
                offset += t.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a veil tensor container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        let data = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Checkpoint(format!("tensor {} shape/len mismatch", e.name)));
            }
            let start = e.offset * 8;
            let end = start + e.len * 8;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("tensor {} is truncated", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Param {
                name: e.name,
                shape: e.shape,
                data: values,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
