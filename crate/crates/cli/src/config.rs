//! `cxr` configuration file. Every field is optional; see `cxr.example.toml`.

use std::path::{Path, PathBuf};

use cxr_core::augment::{default_policy, AugmentationPolicy};
use cxr_core::experiments::{MaskSource, RetrievalConfig};
use cxr_core::model::{BackboneKind, ModelConfig, TrainingConfig};
use cxr_core::pipeline::PipelineConfig;
use cxr_core::preprocess::PreprocessConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_root: PathBuf,
    /// Manifest file, relative to `data_root`.
    pub manifest: PathBuf,
    pub output_root: PathBuf,
    /// Defaults to `<output_root>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            manifest: "manifest.csv".into(),
            output_root: "output".into(),
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSettings {
    pub n_train_resamples: usize,
    pub n_bootstraps_each: usize,
    pub confidence: f64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self {
            n_train_resamples: 10,
            n_bootstraps_each: 20,
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonSettings {
    pub models: Vec<ModelConfig>,
    /// Adds the "No preprocessing" row for the first model.
    pub ablation: bool,
}

impl Default for ComparisonSettings {
    fn default() -> Self {
        Self {
            models: vec![ModelConfig::new(BackboneKind::TinyTestCnn)],
            ablation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSettings {
    pub addr: String,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
        }
    }
}

fn default_model() -> ModelConfig {
    ModelConfig::new(BackboneKind::TinyTestCnn)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub paths: Paths,
    /// Split, training and projection seed.
    pub seed: u64,
    pub test_fraction: f64,
    pub threshold: f64,
    pub preprocessing_enabled: bool,
    pub preprocess: PreprocessConfig,
    pub augmentation_enabled: bool,
    pub augmentation: AugmentationPolicy,
    pub mask: MaskSource,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    /// Missing keys take the desk-scale values of [`TrainingConfig::desk`].
    #[serde(deserialize_with = "training_over_desk")]
    pub training: TrainingConfig,
    pub retrieval: RetrievalConfig,
    pub bootstrap: BootstrapSettings,
    pub comparison: ComparisonSettings,
    pub serve: ServeSettings,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seed: 0,
            test_fraction: cxr_core::dataset::DEFAULT_TEST_FRACTION,
            threshold: 0.5,
            preprocessing_enabled: true,
            preprocess: PreprocessConfig::default(),
            augmentation_enabled: true,
            augmentation: default_policy(),
            mask: MaskSource::default(),
            model: default_model(),
            training: TrainingConfig::desk(),
            retrieval: RetrievalConfig::default(),
            bootstrap: BootstrapSettings::default(),
            comparison: ComparisonSettings::default(),
            serve: ServeSettings::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingPatch {
    initial_learning_rate: Option<f64>,
    lr_decay_per_epoch: Option<f64>,
    l2_coefficient: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    global_seed: Option<u64>,
}

fn training_over_desk<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TrainingConfig, D::Error> {
    let p = TrainingPatch::deserialize(d)?;
    let base = TrainingConfig::desk();
    Ok(TrainingConfig {
        initial_learning_rate: p.initial_learning_rate.unwrap_or(base.initial_learning_rate),
        lr_decay_per_epoch: p.lr_decay_per_epoch.unwrap_or(base.lr_decay_per_epoch),
        l2_coefficient: p.l2_coefficient.unwrap_or(base.l2_coefficient),
        epochs: p.epochs.unwrap_or(base.epochs),
        batch_size: p.batch_size.unwrap_or(base.batch_size),
        global_seed: p.global_seed.unwrap_or(base.global_seed),
    })
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl CliConfig {
    /// Reads `path` (relative paths inside resolve against its directory),
    /// or the defaults relative to the working directory.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                let cfg: CliConfig = toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", p.display()))?;
                (cfg, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (CliConfig::default(), PathBuf::new()),
        };
        if !base.as_os_str().is_empty() {
            rebase(&base, &mut cfg.paths.data_root);
            rebase(&base, &mut cfg.paths.output_root);
            if let Some(c) = &mut cfg.paths.checkpoint_dir {
                rebase(&base, c);
            }
            if let MaskSource::File { path } = &mut cfg.mask {
                rebase(&base, path);
            }
        }
        Ok(cfg)
    }

    /// Applies the path environment overrides and `--seed`.
    pub fn apply_overrides(&mut self, env: impl Fn(&str) -> Option<String>, seed: Option<u64>) {
        if let Some(v) = env("CXR_DATA_ROOT") {
            self.paths.data_root = v.into();
        }
        if let Some(v) = env("CXR_OUTPUT_ROOT") {
            self.paths.output_root = v.into();
        }
        if let Some(v) = env("CXR_CHECKPOINT_DIR") {
            self.paths.checkpoint_dir = Some(v.into());
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        self.training.global_seed = self.seed;
        self.retrieval.tsne.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        self.model.validate().map_err(|e| e.to_string())?;
        for m in &self.comparison.models {
            m.validate().map_err(|e| e.to_string())?;
        }
        self.training.validate().map_err(|e| e.to_string())?;
        self.augmentation.validate().map_err(|e| e.to_string())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.data_root.join(&self.paths.manifest)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.output_root.join(name)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.paths.output_root.join("checkpoints"))
    }

    pub fn pipeline_config(&self, preprocessing_enabled: bool) -> PipelineConfig {
        PipelineConfig {
            preprocess: self.preprocess,
            preprocessing_enabled,
            augmentation: self.augmentation_enabled.then(|| self.augmentation.clone()),
            global_seed: self.seed,
        }
    }
}
