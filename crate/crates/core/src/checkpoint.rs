//! Portable checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"ADFZ" | version: u32 | header_len: u32 | header: JSON (header_len bytes) | blobs
//! ```
//!
//! The JSON header records the model config, a manifest of tensors
//! (`name`, `shape`, `group`, byte `offset` into the blob section, element
//! count `len`) and optional optimiser and training state. Blobs are raw
//! `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelConfig;

pub const MAGIC: &[u8; 4] = b"ADFZ";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: &str, shape: &[usize], data: Vec<f32>) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    group: TensorGroup,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    optimizer: Option<serde_json::Value>,
    #[serde(default)]
    train_state: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
    pub optimizer: Option<serde_json::Value>,
    pub train_state: Option<serde_json::Value>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: Vec<NamedTensor>) -> Self {
        Self {
            config,
            params,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            optimizer: None,
            train_state: None,
        }
    }

    fn groups(&self) -> [(TensorGroup, &Vec<NamedTensor>); 3] {
        [
            (TensorGroup::Param, &self.params),
            (TensorGroup::AdamM, &self.adam_m),
            (TensorGroup::AdamV, &self.adam_v),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        for (group, list) in self.groups() {
            for t in list {
                if t.shape.iter().product::<usize>() != t.data.len() {
                    return Err(corrupt(format!("tensor {} data does not match shape {:?}", t.name, t.shape)));
                }
                tensors.push(ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    group,
                    offset: blob.len(),
                    len: t.data.len(),
                });
                blob.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors,
            optimizer: self.optimizer.clone(),
            train_state: self.train_state.clone(),
        })?;
        let header_len = u32::try_from(header.len()).map_err(|_| corrupt("header too large"))?;
        let mut out = Vec::with_capacity(12 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(corrupt("not an ADFZ checkpoint"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let header_len = word(8) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
        let blob = &bytes[header_end..];
        let mut ckpt = Checkpoint::new(header.config, Vec::new());
        ckpt.optimizer = header.optimizer;
        ckpt.train_state = header.train_state;
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(corrupt(format!("tensor {} length does not match shape", e.name)));
            }
            let end = e
                .len
                .checked_mul(4)
                .and_then(|n| e.offset.checked_add(n))
                .filter(|&end| end <= blob.len())
                .ok_or_else(|| corrupt(format!("tensor {} runs past the end of the file", e.name)))?;
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            };
            match e.group {
                TensorGroup::Param => ckpt.params.push(t),
                TensorGroup::AdamM => ckpt.adam_m.push(t),
                TensorGroup::AdamV => ckpt.adam_v.push(t),
            }
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(
            ModelConfig::tiny(),
            vec![
                NamedTensor::new("a", &[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-20]),
                NamedTensor::new("b", &[3], vec![7.0, 8.0, 9.0]),
            ],
        );
        c.adam_m = vec![NamedTensor::new("a", &[2, 2], vec![0.5; 4])];
        c.optimizer = Some(serde_json::json!({"step": 3}));
        c
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.adam_m, c.adam_m);
        assert!(back.adam_v.is_empty());
        assert_eq!(back.config, c.config);
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.params[0].data[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ADFZ");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
        assert_eq!(header["tensors"][1]["offset"], 16);
        assert_eq!(bytes.len(), 12 + n + 4 * (4 + 3 + 4));
    }

    #[test]
    fn rejects_damaged_files() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(b"ADF").is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(Checkpoint::from_bytes(&bad_version).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_len = bytes.clone();
        bad_len[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bad_len).is_err());
    }
}
