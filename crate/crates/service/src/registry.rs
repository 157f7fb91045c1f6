//! File-backed model registry.

use std::path::{Path, PathBuf};

use cxr_core::experiments::MaskSource;
use cxr_core::imaging::write_atomic;
use cxr_core::model::ModelConfig;
use cxr_core::pipeline::PipelineConfig;
use cxr_core::{Error, Result};
use serde::{Deserialize, Serialize};

fn default_threshold() -> f64 {
    0.5
}

fn default_mask() -> MaskSource {
    MaskSource::Constant { value: 0.5 }
}

/// One deployable classifier and the artifacts served alongside it.
///
/// Relative paths resolve against the directory holding the registry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistryEntry {
    pub model_id: String,
    pub checkpoint: PathBuf,
    pub model_config: ModelConfig,
    pub created: String,
    pub is_active: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_mask")]
    pub mask: MaskSource,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Embedding file whose train rows form the retrieval index.
    #[serde(default)]
    pub index: Option<PathBuf>,
    #[serde(default)]
    pub projection: Option<PathBuf>,
    /// Manifest used to render indexed scans.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub models: Vec<ModelRegistryEntry>,
}

impl Registry {
    pub fn validate(&self) -> Result<()> {
        let active = self.models.iter().filter(|m| m.is_active).count();
        if active != 1 {
            return Err(Error::Config(format!("registry must have exactly one active model, found {active}")));
        }
        let mut ids: Vec<&str> = self.models.iter().map(|m| m.model_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate model_id `{}`", w[0])));
        }
        if let Some(m) = self.models.iter().find(|m| matches!(m.mask, MaskSource::Train(_))) {
            return Err(Error::Config(format!("model `{}`: served mask models must be files or constants", m.model_id)));
        }
        if let Some(m) = self.models.iter().find(|m| !(0.0..=1.0).contains(&m.threshold)) {
            return Err(Error::Config(format!("model `{}`: threshold outside [0, 1]", m.model_id)));
        }
        Ok(())
    }

    pub fn active(&self) -> Option<&ModelRegistryEntry> {
        self.models.iter().find(|m| m.is_active)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let reg: Registry = serde_json::from_str(&text)?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Adds or replaces `entry` by id. An active entry deactivates the rest.
    pub fn register(&mut self, entry: ModelRegistryEntry) {
        if entry.is_active {
            for m in &mut self.models {
                m.is_active = false;
            }
        }
        match self.models.iter_mut().find(|m| m.model_id == entry.model_id) {
            Some(slot) => *slot = entry,
            None => self.models.push(entry),
        }
    }

    pub fn activate(&mut self, model_id: &str) -> Result<()> {
        if !self.models.iter().any(|m| m.model_id == model_id) {
            return Err(Error::InvalidArgument(format!("unknown model `{model_id}`")));
        }
        for m in &mut self.models {
            m.is_active = m.model_id == model_id;
        }
        Ok(())
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
