use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, ConditionTable, Model};
use crate::autodiff::Tensor;
use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "lcpvae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model: architecture, seed, condition table, ablation
/// statistics and every parameter tensor keyed by `block.layer.kind`.
///
/// Keys are kept sorted so the JSON text is stable across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub architecture: Architecture,
    pub conditions: ConditionTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_stats: Option<Vec<DiagGaussian>>,
    /// Fully resolved run configuration, echoed for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                detail: format!("not a checkpoint (format `{}`)", ckpt.format),
            });
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(ckpt)
    }
}

impl Model {
    pub fn to_checkpoint(&self, config: Option<serde_json::Value>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            architecture: self.arch.clone(),
            conditions: self.conditions.clone(),
            condition_stats: self.condition_stats.clone(),
            config,
            params: self
                .params
                .names()
                .iter()
                .cloned()
                .zip(self.params.tensors().iter().cloned())
                .collect(),
        }
    }

    /// Rebuilds the model layout and fills in the stored parameters. Every
    /// parameter must be present with its expected shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(
            ckpt.architecture.clone(),
            ckpt.conditions.clone(),
            ckpt.condition_stats.clone(),
            ckpt.seed,
        )?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        let tensors = model
            .params
            .names()
            .iter()
            .zip(model.params.tensors())
            .map(|(name, init)| {
                let t = ckpt
                    .params
                    .get(name)
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks `{name}`")))?;
                if t.shape() != init.shape() {
                    return Err(Error::Data(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        init.shape()
                    )));
                }
                Ok(t.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        model.params.replace(tensors)?;
        Ok(model)
    }
}
