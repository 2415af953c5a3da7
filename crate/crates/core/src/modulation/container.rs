//! Binary container shared by bias packs and checkpoints.
//!
//! Layout: 8-byte magic, `u64` little-endian manifest length, the UTF-8 JSON
//! manifest, then every tensor as little-endian `f32` in manifest order.
//! Tensor offsets in the manifest are byte offsets into the blob section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::numerics::Tensor;

pub const CONTAINER_MAGIC: &[u8; 8] = b"TMODCNT1";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Number of `f32` values stored in the blob section.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = (t.len() * 4) as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    bytes,
                };
                offset += bytes;
                e
            })
            .collect();
        let manifest = Manifest {
            format: "taskmod-container".into(),
            version: CONTAINER_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CONTAINER_MAGIC {
            return Err(Error::Format("missing container magic".into()));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start = 16usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("manifest length exceeds file size".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..blob_start])?;
        if manifest.version != CONTAINER_VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {}",
                manifest.version
            )));
        }
        let blobs = &bytes[blob_start..];
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let elems: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.bytes != (elems * 4) as u64 {
                return Err(Error::Format(format!("tensor `{}` has an inconsistent layout", e.name)));
            }
            let start = e.offset as usize;
            let end = start + e.bytes as usize;
            let raw = blobs
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("tensor `{}` runs past end of file", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
            expected_offset = end as u64;
        }
        if expected_offset as usize != blobs.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    fsutil::write_atomic(path, &container.encode()?)
}

pub fn read_container(path: &Path) -> Result<Container> {
    Container::decode(&fsutil::read(path)?)
}
