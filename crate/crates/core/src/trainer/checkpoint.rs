//! Checkpoint container.
//!
//! Layout: the 8-byte magic `DAPSCK01`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every array of the header's `arrays` list as
//! little-endian `f64` values, in that order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::Window;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DAPSCK01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Trainer state that is not a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerScalars {
    pub encoder_opt: AdamState,
    pub decoder_opt: AdamState,
    pub encoder_lr_scale: f64,
    pub low_ess_streak: u64,
    #[serde(default)]
    pub guard_step: Option<u64>,
    pub window: Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: Config,
    pub step: u64,
    pub arrays: Vec<ArraySpec>,
    pub trainer: TrainerScalars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub arrays: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.arrays.len() != self.arrays.len() {
            return Err(Error::Invalid("checkpoint header and arrays disagree".into()));
        }
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Invalid(e.to_string()))?;
        let floats: usize = self.arrays.iter().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (spec, t) in self.header.arrays.iter().zip(&self.arrays) {
            if spec.shape != t.shape() {
                return Err(Error::Invalid(format!("array {} has shape {:?}, header says {:?}", spec.name, t.shape(), spec.shape)));
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(Error::format(path, format!("truncated header: expected {len} bytes, found {}", body.len())));
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::format(path, format!("header: {e}")))?;
        let mut rest = &body[len..];
        let expected: usize = header.arrays.iter().map(|a| 8 * a.shape.iter().product::<usize>()).sum();
        if rest.len() != expected {
            return Err(Error::format(path, format!("payload size mismatch: expected {expected} bytes, found {}", rest.len())));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for spec in &header.arrays {
            let n: usize = spec.shape.iter().product();
            let data = rest[..8 * n].chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            rest = &rest[8 * n..];
            arrays.push(Tensor::new(spec.shape.clone(), data)?);
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.header.arrays.iter().position(|a| a.name == name).map(|i| &self.arrays[i])
    }
}
