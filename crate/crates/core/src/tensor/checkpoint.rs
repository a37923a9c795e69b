//! Parameter checkpoint file.
//!
//! Layout: an 8-byte little-endian header length, a JSON header listing every
//! array (name, shape, dtype, byte offset into the blob, byte length) plus a
//! free-form metadata object, then one blob of little-endian `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "pingo-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

/// Named arrays plus metadata, detached from any computation graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_parameters(params: &[(String, Tensor)], metadata: serde_json::Value) -> Self {
        Checkpoint {
            arrays: params
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.to_vec()))
                .collect(),
            metadata,
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, d)| d.as_slice())
    }

    /// Copies stored values into `params`, matching by name and shape.
    pub fn load_into(&self, params: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in params {
            let (_, shape, data) = self
                .arrays
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::config(format!("checkpoint has no array named {name}")))?;
            if shape.as_slice() != tensor.shape() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    lhs: tensor.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            tensor.set_data(data)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0;
        for (name, shape, data) in &self.arrays {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    lhs: shape.clone(),
                    rhs: vec![data.len()],
                });
            }
            let nbytes = data.len() * 8;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f64".into(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header {
            format: FORMAT.into(),
            version: VERSION,
            tensors: entries,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.arrays {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let blob_start = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[8..blob_start])?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad("unknown format or version"));
        }
        let blob = &bytes[blob_start..];
        let mut arrays = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != "f64" {
                return Err(bad("only f64 arrays are supported"));
            }
            let n: usize = e.shape.iter().product();
            if e.nbytes != n * 8 || e.offset + e.nbytes > blob.len() {
                return Err(bad(&format!("array {} overruns the blob", e.name)));
            }
            let data = blob[e.offset..e.offset + e.nbytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((e.name, e.shape, data));
        }
        Ok(Checkpoint {
            arrays,
            metadata: header.metadata,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
