//! Versioned model checkpoints: a named tree of parameter tensors plus the
//! provenance (config hash, seed) needed to reject mismatched artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NdiffError;
use crate::ioutil::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "disputelab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One serialized parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// A named parameter tree with format/version markers. Parameter names are
/// dotted paths like `word_lstm.fwd.w`, kept sorted for stable serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Architecture tag (for example `averaged` or `hierarchical`); loaders
    /// refuse checkpoints built for a different model shape.
    pub architecture: String,
    pub config_hash: String,
    pub seed: u64,
    pub parameters: BTreeMap<String, ParamTensor>,
}

impl Checkpoint {
    pub fn new(architecture: &str, config_hash: &str, seed: u64) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture: architecture.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            parameters: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: &Tensor) {
        self.parameters.insert(
            name.to_string(),
            ParamTensor {
                rows: tensor.rows(),
                cols: tensor.cols(),
                data: tensor.data().to_vec(),
            },
        );
    }

    /// Fetch a parameter and validate its shape against what the caller's
    /// architecture expects.
    pub fn tensor(&self, name: &str, rows: usize, cols: usize) -> Result<Tensor, NdiffError> {
        let param = self
            .parameters
            .get(name)
            .ok_or_else(|| NdiffError::MissingParameter { name: name.to_string() })?;
        if param.rows != rows || param.cols != cols {
            return Err(NdiffError::ParameterShape {
                name: name.to_string(),
                rows,
                cols,
                found_rows: param.rows,
                found_cols: param.cols,
            });
        }
        Tensor::from_data(param.rows, param.cols, param.data.clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), NdiffError> {
        let json = serde_json::to_string(self)
            .map_err(|e| NdiffError::Format(format!("serializing checkpoint: {e}")))?;
        write_atomic(path, json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, NdiffError> {
        let raw = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&raw)
            .map_err(|e| NdiffError::Format(format!("parsing checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(NdiffError::Format(format!(
                "not a {CHECKPOINT_FORMAT} file (found format {:?})",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(NdiffError::Format(format!(
                "unsupported checkpoint version {} (this build reads {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        for (name, p) in &ckpt.parameters {
            if p.data.len() != p.rows * p.cols {
                return Err(NdiffError::Format(format!(
                    "parameter {name} claims {}x{} but holds {} values",
                    p.rows,
                    p.cols,
                    p.data.len()
                )));
            }
        }
        Ok(ckpt)
    }
}
