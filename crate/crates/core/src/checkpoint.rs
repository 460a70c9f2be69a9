//! Checkpoint payload: a structured text header (metadata plus a manifest of
//! name/shape/offset entries) followed by one flat little-endian f64 blob.
//! The header records a SHA-256 of the blob; a mismatch fails the load before
//! any state is handed out.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"BEERCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, String>,
    manifest: Vec<ManifestEntry>,
    blob_len: usize,
    blob_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Default)]
pub struct CheckpointWriter {
    meta: BTreeMap<String, String>,
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl CheckpointWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn add_array(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((name.to_string(), shape, data));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut manifest = Vec::with_capacity(self.entries.len());
        let mut blob = Vec::new();
        let mut offset = 0usize;
        for (name, shape, data) in &self.entries {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len(),
            });
            offset += data.len();
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            meta: self.meta.clone(),
            manifest,
            blob_len: offset,
            blob_sha256: hex(&Sha256::digest(&blob)),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| CoreError::CheckpointFormat(e.to_string()))?;

        let mut out = Vec::with_capacity(MAGIC.len() + 12 + header_json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&blob);
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < MAGIC.len() + 12 {
            return Err(CoreError::CheckpointTruncated {
                expected: MAGIC.len() + 12,
                found: bytes.len(),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CoreError::CheckpointFormat("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CoreError::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let blob_start = 20 + header_len;
        if bytes.len() < blob_start {
            return Err(CoreError::CheckpointTruncated {
                expected: blob_start,
                found: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[20..blob_start])
            .map_err(|e| CoreError::CheckpointFormat(e.to_string()))?;
        let blob = &bytes[blob_start..];
        if blob.len() != header.blob_len * 8 {
            return Err(CoreError::CheckpointTruncated {
                expected: blob_start + header.blob_len * 8,
                found: bytes.len(),
            });
        }
        if hex(&Sha256::digest(blob)) != header.blob_sha256 {
            return Err(CoreError::CheckpointChecksum);
        }
        let mut arrays = BTreeMap::new();
        for entry in header.manifest {
            let start = entry.offset * 8;
            let end = start + entry.len * 8;
            if end > blob.len() {
                return Err(CoreError::CheckpointFormat(format!(
                    "entry {} overruns the blob",
                    entry.name
                )));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if entry.shape.iter().product::<usize>() != data.len() {
                return Err(CoreError::CheckpointFormat(format!(
                    "entry {} shape/len disagree",
                    entry.name
                )));
            }
            arrays.insert(entry.name, (entry.shape, data));
        }
        Ok(Checkpoint {
            meta: header.meta,
            arrays,
        })
    }

    pub fn array(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.arrays
            .get(name)
            .ok_or_else(|| CoreError::CheckpointMissingEntry(name.to_string()))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| CoreError::CheckpointMissingEntry(format!("meta.{key}")))
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|s| s.as_str())
    }
}
