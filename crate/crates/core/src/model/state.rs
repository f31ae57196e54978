//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `STAGNNCK`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every parameter
//! value as little-endian `f64` in header order. Values round-trip exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::graph::AdjacencyMatrix;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"STAGNNCK";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    adjacency: Option<AdjacencyMatrix>,
    norm_digest: Option<String>,
    training: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

/// A trained model plus the context needed to reuse it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Digest of the normalization statistics the model was trained with.
    pub norm_digest: Option<String>,
    /// Training configuration, stored opaquely.
    pub training: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model: self.model.config().clone(),
            adjacency: self.model.adjacency().cloned(),
            norm_digest: self.norm_digest.clone(),
            training: self.training.clone(),
            tensors: params
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let numel: usize = params.values().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * numel);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("invalid checkpoint: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut values = body[hlen..].chunks_exact(8);
        if !values.remainder().is_empty() {
            return Err(bad("trailing bytes"));
        }
        let mut params = ParamStore::new();
        for (name, shape) in header.tensors {
            let numel: usize = shape.iter().product();
            if values.len() < numel {
                return Err(bad("truncated tensor data"));
            }
            let data = values
                .by_ref()
                .take(numel)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if values.len() != 0 {
            return Err(bad("unreferenced tensor data"));
        }
        Ok(Self {
            model: Model::from_parts(header.model, header.adjacency, params)?,
            norm_digest: header.norm_digest,
            training: header.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
