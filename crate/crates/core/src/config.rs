//! Run configuration. Stored as JSON with a version field; every output
//! directory receives the fully resolved copy.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Architecture, ConditionKind, FreezeScope, ModelKind};
use crate::training::{AdamConfig, AnnealSchedule};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelKind,
    pub condition_input: ConditionKind,
    pub latent_dim: usize,
    pub primary_hidden: Vec<usize>,
    pub csvae_hidden: Vec<usize>,
    pub anneal: AnnealSchedule,
    pub optimizer: AdamConfig,
    pub freeze_scope: FreezeScope,
    pub epochs: usize,
    pub batch_size: usize,
    /// Metrics are logged every this many steps (and at the last step).
    pub log_every: u64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            model: ModelKind::Lcpvae,
            condition_input: ConditionKind::Embedding,
            latent_dim: 2,
            primary_hidden: vec![64, 64],
            csvae_hidden: vec![32],
            anneal: AnnealSchedule::default(),
            optimizer: AdamConfig::default(),
            freeze_scope: FreezeScope::KlOnly,
            epochs: 100,
            batch_size: 32,
            log_every: 50,
            seed: 0,
            dataset: None,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.primary_hidden.contains(&0) || self.csvae_hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        self.anneal.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }

    pub fn architecture(&self, data_dim: usize) -> Architecture {
        Architecture::new(self.model, data_dim, self.latent_dim)
            .with_hidden(self.primary_hidden.clone(), self.csvae_hidden.clone())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
