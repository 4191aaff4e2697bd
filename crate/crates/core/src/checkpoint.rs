//! Named-array checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length (all
//! little-endian), a JSON manifest, then the concatenated array blobs as
//! little-endian `f32`. The manifest lists every array with its shape and
//! byte offset, free-form metadata (config snapshot, prototype fit info) and
//! the SHA-256 of the blob section.

use std::collections::BTreeMap;
use std::path::Path;

use prn_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PrnError, Result};

pub const MAGIC: &[u8; 8] = b"PRNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    byte_order: String,
    arrays: Vec<ArrayEntry>,
    metadata: BTreeMap<String, serde_json::Value>,
    sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: BTreeMap<String, Tensor<f32>>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Tensor<f32>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn array(&self, name: &str) -> Result<&Tensor<f32>> {
        self.arrays.get(name).ok_or_else(|| PrnError::Integrity(format!("array `{name}` is missing")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, array) in &self.arrays {
            let offset = blobs.len() as u64;
            for v in array.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: array.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                bytes: blobs.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            byte_order: "little".into(),
            arrays: entries,
            metadata: self.metadata.clone(),
            sha256: hex::encode(Sha256::digest(&blobs)),
        };
        let manifest = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + manifest.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blobs);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| PrnError::Integrity(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(PrnError::Version { found: version, expected: FORMAT_VERSION });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if mlen > body.len() {
            return Err(bad("manifest length exceeds file size"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| PrnError::Integrity(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(bad("manifest version disagrees with header"));
        }
        if manifest.byte_order != "little" {
            return Err(PrnError::Integrity(format!("unsupported byte order `{}`", manifest.byte_order)));
        }
        let blobs = &body[mlen..];
        if hex::encode(Sha256::digest(blobs)) != manifest.sha256 {
            return Err(bad("content hash mismatch"));
        }
        let mut arrays = BTreeMap::new();
        for entry in manifest.arrays {
            if entry.dtype != "f32" {
                return Err(PrnError::Integrity(format!("array `{}` has unsupported dtype {}", entry.name, entry.dtype)));
            }
            let count: usize = entry.shape.iter().product();
            let (start, len) = (entry.offset as usize, entry.bytes as usize);
            if len != count * 4 || start.checked_add(len).is_none_or(|end| end > blobs.len()) {
                return Err(PrnError::Integrity(format!("array `{}` has an inconsistent extent", entry.name)));
            }
            let data = blobs[start..start + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(entry.name, Tensor::new(&entry.shape, data));
        }
        Ok(Self { arrays, metadata: manifest.metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| PrnError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| PrnError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PrnError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(format!("reading checkpoint {}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("a/w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0));
        c.insert("b", Tensor::new(&[1], vec![f32::MIN_POSITIVE]));
        c.metadata.insert("seed".into(), serde_json::json!(3));
        c
    }

    #[test]
    fn round_trip_is_bitwise_and_idempotent() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(PrnError::Integrity(_))));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(PrnError::Version { found: 7, expected: FORMAT_VERSION }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
