//! Versioned JSON checkpoints for the global model.
//!
//! Tensors are stored by name with their shapes. f64 values round-trip
//! bit-exactly through the JSON encoding (shortest representation that parses
//! back to the same bits).

use crate::error::{Error, Result};
use crate::model::{GlobalModel, ModelConfig};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    /// Number of named tensors carried by this checkpoint.
    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn from_model(model: &GlobalModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: model.config.clone(),
            tensors: model
                .params()
                .iter()
                .map(|p| TensorRecord {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<GlobalModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        // Build the structure from the config, then fill every tensor by name.
        let mut rng = crate::rng::stream(0, &[]);
        let mut model = GlobalModel::init(self.config, &mut rng)?;
        let mut records = self.tensors;
        {
            let params = model.params_mut();
            if params.len() != records.len() {
                return Err(Error::Protocol(format!(
                    "checkpoint has {} tensors, model expects {}",
                    records.len(),
                    params.len()
                )));
            }
            for p in params {
                let idx = records
                    .iter()
                    .position(|r| r.name == p.name)
                    .ok_or_else(|| Error::Protocol(format!("missing tensor {}", p.name)))?;
                let rec = records.swap_remove(idx);
                let tensor = Tensor::new(rec.shape, rec.values)?;
                if tensor.shape() != p.tensor.shape() {
                    return Err(Error::Protocol(format!(
                        "tensor {} has shape {:?}, model expects {:?}",
                        p.name,
                        tensor.shape(),
                        p.tensor.shape()
                    )));
                }
                p.tensor = tensor;
            }
        }
        Ok(model)
    }
}

pub fn save(model: &GlobalModel, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::from_model(model);
    let json = serde_json::to_string(&ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GlobalModel> {
    let json = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&json)?;
    ckpt.into_model()
}
