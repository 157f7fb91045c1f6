//! End-to-end image path: raw radiograph to canonical image, then per-epoch
//! augmentation, lung segmentation and three-channel composition.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_plan, default_policy, sample_plan, AugmentationPolicy};
use crate::dataset::{DatasetManifest, Label, ScanRecord};
use crate::error::Result;
use crate::imaging::{load_raw_image, CanonicalImage, RawImage};
use crate::model::TrainingSource;
use crate::preprocess::{preprocess, preprocess_resize_only, PreprocessConfig};
use crate::seed::derive_seed;
use crate::segmentation::{compose_input, segment_lungs, LungMask, MaskModel, ModelInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    /// When false: resize only, and a zero mask channel.
    pub preprocessing_enabled: bool,
    /// `None` trains on un-augmented images.
    pub augmentation: Option<AugmentationPolicy>,
    pub global_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            preprocessing_enabled: true,
            augmentation: Some(default_policy()),
            global_seed: 0,
        }
    }
}

#[derive(Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    mask_model: Arc<dyn MaskModel>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, mask_model: Arc<dyn MaskModel>) -> Result<Self> {
        if let Some(p) = &config.augmentation {
            p.validate()?;
        }
        Ok(Self { config, mask_model })
    }

    pub fn canonicalize(&self, raw: &RawImage) -> Result<CanonicalImage> {
        if self.config.preprocessing_enabled {
            preprocess(raw, &self.config.preprocess)
        } else {
            Ok(preprocess_resize_only(raw))
        }
    }

    fn compose(&self, img: &CanonicalImage) -> Result<ModelInput> {
        let mask = if self.config.preprocessing_enabled {
            segment_lungs(img, self.mask_model.as_ref())?
        } else {
            LungMask::zeros(img.size())
        };
        compose_input(img, &mask)
    }

    /// Segment and compose, no augmentation.
    pub fn inference_input(&self, img: &CanonicalImage) -> Result<ModelInput> {
        self.compose(img)
    }

    pub fn raw_to_input(&self, raw: &RawImage) -> Result<ModelInput> {
        self.compose(&self.canonicalize(raw)?)
    }

    /// Augments with the plan seeded by `(global_seed, epoch, scan_id)`,
    /// then segments and composes.
    pub fn training_input(&self, img: &CanonicalImage, scan_id: &str, epoch: usize) -> Result<ModelInput> {
        match &self.config.augmentation {
            Some(policy) => {
                let plan = sample_plan(policy, derive_seed(self.config.global_seed, epoch as u64, scan_id));
                self.compose(&apply_plan(img, &plan))
            }
            None => self.compose(img),
        }
    }
}

/// A scan held in memory after canonicalization.
#[derive(Debug, Clone)]
pub struct CanonicalScan {
    pub scan_id: String,
    pub label: Label,
    pub image: Arc<CanonicalImage>,
}

/// Loads and canonicalizes `records`, in parallel, preserving order.
pub fn canonicalize_records<'a>(
    pipeline: &Pipeline,
    manifest_dir: &std::path::Path,
    records: impl IntoIterator<Item = &'a ScanRecord>,
) -> Result<Vec<CanonicalScan>> {
    let records: Vec<&ScanRecord> = records.into_iter().collect();
    records
        .par_iter()
        .map(|r| {
            let raw = load_raw_image(DatasetManifest::resolve_image_path(r, manifest_dir))?;
            Ok(CanonicalScan {
                scan_id: r.scan_id.clone(),
                label: r.label,
                image: Arc::new(pipeline.canonicalize(&raw)?),
            })
        })
        .collect()
}

/// Training set backed by canonical images and a [`Pipeline`].
pub struct ScanSource<'a> {
    pub pipeline: &'a Pipeline,
    pub scans: &'a [CanonicalScan],
}

impl TrainingSource for ScanSource<'_> {
    fn len(&self) -> usize {
        self.scans.len()
    }

    fn label(&self, i: usize) -> Label {
        self.scans[i].label
    }

    fn input(&self, i: usize, epoch: usize) -> Result<ModelInput> {
        let s = &self.scans[i];
        self.pipeline.training_input(&s.image, &s.scan_id, epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::ConstantMask;
    use crate::synth::{chest_radiograph, ChestParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pipeline(enabled: bool) -> Pipeline {
        let cfg = PipelineConfig {
            preprocessing_enabled: enabled,
            ..Default::default()
        };
        Pipeline::new(cfg, Arc::new(ConstantMask { value: 0.25, size: 32 })).unwrap()
    }

    #[test]
    fn ablation_zeroes_mask_and_skips_normalization() {
        let raw = chest_radiograph(true, &ChestParams::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let full = pipeline(true).raw_to_input(&raw).unwrap();
        let bare = pipeline(false).raw_to_input(&raw).unwrap();
        assert!(full.channel(1).iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert!(bare.channel(1).iter().all(|&v| v == 0.0));
        assert_eq!(&*bare.channel(0), preprocess_resize_only(&raw).pixels());
        assert_ne!(full.channel(0), bare.channel(0));
    }

    #[test]
    fn training_input_depends_on_epoch_and_id_only() {
        let raw = chest_radiograph(false, &ChestParams::default(), &mut ChaCha8Rng::seed_from_u64(2));
        let p = pipeline(true);
        let img = p.canonicalize(&raw).unwrap();
        let a = p.training_input(&img, "s1", 3).unwrap();
        let b = p.training_input(&img, "s1", 3).unwrap();
        assert_eq!(a.channel(0), b.channel(0));
        let epochs_differ = (0..4).any(|e| p.training_input(&img, "s1", e).unwrap().channel(0) != a.channel(0));
        assert!(epochs_differ);
    }
}
