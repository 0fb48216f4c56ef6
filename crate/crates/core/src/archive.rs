//! Named-tensor archive.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! then the tensor payload. The header lists `{name, shape, dtype, offset,
//! len}` per tensor (offsets relative to the payload start), free-form
//! metadata, and the SHA-256 of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GAITARC1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    meta: serde_json::Value,
    payload_sha256: String,
}

/// Tensors and metadata read from or destined for an archive file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { tensors: BTreeMap::new(), meta }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Artifact(format!("archive has no tensor {name}")))
    }

    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len();
            for &v in t.data() {
                match dtype {
                    DType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype,
                offset,
                len: payload.len() - offset,
            });
        }
        let header = Header {
            tensors: entries,
            meta: self.meta.clone(),
            payload_sha256: sha256_hex(&payload),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Artifact(format!("corrupted archive: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad("header length exceeds file"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("header: {e}")))?;
        let payload = &body[hlen..];
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let numel: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.len).ok_or_else(|| bad("offset overflow"))?;
            if e.len != numel * e.dtype.size() || end > payload.len() {
                return Err(bad(&format!("tensor {} out of bounds", e.name)));
            }
            let raw = &payload[e.offset..end];
            let data: Vec<f64> = match e.dtype {
                DType::F32 => raw.chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
                DType::F64 => raw.chunks(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            };
            tensors.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(Self { tensors, meta: header.meta })
    }

    pub fn write(&self, path: &Path, dtype: DType) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
