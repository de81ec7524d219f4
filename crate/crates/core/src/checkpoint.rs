//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CAPRCKPT"              8-byte magic
//! u32                      container version
//! u64                      header length in bytes
//! header                   JSON: {kind, config, tensors: [{name, rows, cols}]}
//! f64 * sum(rows * cols)   tensor data, row-major, in header order
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{Mat, ParamSet};

pub const MAGIC: &[u8; 8] = b"CAPRCKPT";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C) -> Result<Self> {
        Ok(Self {
            kind: kind.to_owned(),
            config: serde_json::to_value(config).map_err(|e| Error::Checkpoint(e.to_string()))?,
            tensors: Vec::new(),
        })
    }

    pub fn add_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, value) in params.iter() {
            self.tensors.push((format!("{prefix}.{name}"), value.clone()));
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }

    /// Fills a parameter set with the tensors stored under `prefix`. Names
    /// and shapes must match `template` exactly.
    pub fn extract_params(&self, prefix: &str, template: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, shape_of) in template.iter() {
            let full = format!("{prefix}.{name}");
            let (_, value) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
            if value.dim() != shape_of.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {full} has shape {:?}, expected {:?}",
                    value.dim(),
                    shape_of.dim()
                )));
            }
            out.push(name, value.clone());
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorInfo {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let n_values: usize = self.tensors.iter().map(|(_, m)| m.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(Error::Checkpoint(format!("unsupported container version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut offset = 20 + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n = info.rows * info.cols;
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", info.name)))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = Array2::from_shape_vec((info.rows, info.cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((info.name, m));
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(err("trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut params = ParamSet::new();
        params.push("w", array![[1.0, -2.5e-300], [f64::MIN_POSITIVE, 3.0]]);
        params.push("b", array![[0.1, 0.2, 0.3]]);
        let mut ck = Checkpoint::new("toy", &serde_json::json!({"d": 2})).unwrap();
        ck.add_params("tower", &params);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.extract_params("tower", &params).unwrap(), params);
        assert!(back.has_prefix("tower") && !back.has_prefix("head"));
    }

    #[test]
    fn rejects_shape_mismatch_and_garbage() {
        let mut params = ParamSet::new();
        params.push("w", array![[1.0, 2.0]]);
        let mut ck = Checkpoint::new("toy", &()).unwrap();
        ck.add_params("t", &params);
        let mut other = ParamSet::new();
        other.push("w", array![[1.0], [2.0]]);
        assert!(ck.extract_params("t", &other).is_err());
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint").is_err());
        let mut bytes = ck.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
