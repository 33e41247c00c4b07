use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "seqhtc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing JSON snapshot of a model. Floats are written in their
/// shortest round-trip form, so save/load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub taxonomy_hash: String,
    pub model: ModelConfig,
    /// Free-form run metadata (training configuration, epoch, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, taxonomy_hash: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            taxonomy_hash: taxonomy_hash.into(),
            model: params.config,
            metadata,
            tensors: params
                .tensors()
                .into_iter()
                .map(|t| StoredTensor {
                    name: t.name,
                    shape: t.shape,
                    data: t.data.to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the parameters, checking every name and shape.
    pub fn to_params(&self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut params = ModelParams::zeros(self.model);
        let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (slot, stored)) in expected.iter().zip(params.slices_mut().into_iter().zip(&self.tensors)) {
            if &stored.name != name || &stored.shape != shape || stored.data.len() != slot.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    stored.name, stored.shape
                )));
            }
            slot.copy_from_slice(&stored.data);
        }
        if !params.all_finite() {
            return Err(Error::Checkpoint("checkpoint holds non-finite values".into()));
        }
        Ok(params)
    }

    pub fn check_taxonomy(&self, hash: &str) -> Result<()> {
        if self.taxonomy_hash == hash {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint was trained on taxonomy {}, current taxonomy is {hash}",
                self.taxonomy_hash
            )))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("cannot parse checkpoint: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
