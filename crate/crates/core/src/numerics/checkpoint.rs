//! Self-describing tensor container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (metadata plus a tensor directory), then the raw little-endian payload of
//! every tensor in directory order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NumericsError, Tensor};

const MAGIC: &[u8; 8] = b"LMCKPT\x00\x01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Shared tag for encoders trained jointly; used to refuse mismatched pairs.
    #[serde(default)]
    pub lineage: Option<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(kind: impl Into<String>, step: u64, config: serde_json::Value) -> Self {
        let config_hash = config_hash(&config);
        Self {
            kind: kind.into(),
            step,
            config,
            config_hash,
            lineage: None,
            extra: BTreeMap::new(),
        }
    }
}

/// Hex SHA-256 prefix of a JSON value's compact serialization.
pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String, NumericsError> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    dtype: Dtype,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>, NumericsError> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape(),
                offset,
            });
            offset += t.len() * dtype.width();
        }
        let header = Header {
            meta: self.meta.clone(),
            dtype,
            tensors: entries,
        };
        let header =
            serde_json::to_vec(&header).map_err(|e| NumericsError::Checkpoint(format!("header encode: {e}")))?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            match dtype {
                Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => t
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        let bad = |m: &str| NumericsError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| NumericsError::Checkpoint(format!("header decode: {e}")))?;
        let payload = &bytes[body..];
        let w = header.dtype.width();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.shape[0] * e.shape[1];
            let raw = payload
                .get(e.offset..e.offset + n * w)
                .ok_or_else(|| NumericsError::Checkpoint(format!("truncated tensor {}", e.name)))?;
            let data: Vec<f64> = match header.dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            tensors.push((e.name, Tensor::new(e.shape[0], e.shape[1], data)?));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<(), NumericsError> {
        let bytes = self.to_bytes(dtype)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointMeta::new("test", 7, serde_json::json!({"d": 4})));
        c.insert("a", Tensor::new(2, 2, vec![0.1, -2.5, 1e-300, 3.0]).unwrap());
        c.insert("b", Tensor::row_vector(vec![std::f64::consts::PI]));
        c
    }

    #[test]
    fn f64_round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(Dtype::F64).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn f32_round_trip_rounds() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(Dtype::F32).unwrap()).unwrap();
        let pi = back.get("b").unwrap().get(0, 0);
        assert_eq!(pi, std::f64::consts::PI as f32 as f64);
        assert_eq!(back.meta.step, 7);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let mut bytes = sample().to_bytes(Dtype::F64).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = config_hash(&serde_json::json!({"d": 4}));
        let b = config_hash(&serde_json::json!({"d": 5}));
        assert_ne!(a, b);
        assert_eq!(a.len(), 16);
    }
}
