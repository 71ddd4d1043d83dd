//! Parameter checkpoints: a single JSON file of named arrays with shape
//! headers, the run seed, and a format tag.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor2D;

pub const FORMAT_TAG: &str = "nashgen-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_tag: String,
    /// `"diffusion"` or `"supervised"`.
    pub kind: String,
    pub seed: u64,
    /// Architecture sizes and schedule constants needed to rebuild the model.
    pub meta: BTreeMap<String, serde_json::Value>,
    pub arrays: BTreeMap<String, NamedArray>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64) -> Self {
        Checkpoint {
            format_tag: FORMAT_TAG.to_string(),
            kind: kind.to_string(),
            seed,
            meta: BTreeMap::new(),
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: &Tensor2D) {
        self.arrays.insert(
            name.to_string(),
            NamedArray {
                rows: tensor.rows,
                cols: tensor.cols,
                data: tensor.data.clone(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<Tensor2D> {
        let arr = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        if arr.data.len() != arr.rows * arr.cols {
            return Err(Error::Checkpoint(format!(
                "array `{name}` header {}x{} does not match {} elements",
                arr.rows,
                arr.cols,
                arr.data.len()
            )));
        }
        Tensor2D::from_vec(arr.rows, arr.cols, arr.data.clone())
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key `{key}`")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key `{key}`")))
    }

    pub fn set_meta_u64(&mut self, key: &str, value: u64) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn set_meta_f64(&mut self, key: &str, value: f64) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            Error::Checkpoint(format!("cannot read `{}`: {e}", path.display()))
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&raw)
            .map_err(|e| Error::Checkpoint(format!("parse `{}`: {e}", path.display())))?;
        if ckpt.format_tag != FORMAT_TAG {
            return Err(Error::Checkpoint(format!(
                "format tag `{}` unsupported (expected `{FORMAT_TAG}`)",
                ckpt.format_tag
            )));
        }
        Ok(ckpt)
    }
}
