//! Immutable model snapshots and the per-process upload store.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use cxr_core::dataset::{load_manifest, DatasetManifest, Label};
use cxr_core::model::TrainedModel;
use cxr_core::pipeline::Pipeline;
use cxr_core::retrieval::{build_index, read_entries, read_projection, EmbeddingEntry, EmbeddingIndex, ProjectedPoint, Split};
use cxr_core::Result;

use crate::registry::{resolve, ModelRegistryEntry, Registry};

/// Everything loaded for the active registry entry. Never mutated once built.
pub struct Snapshot {
    pub entry: ModelRegistryEntry,
    pub model: TrainedModel,
    pub pipeline: Pipeline,
    pub index: Option<EmbeddingIndex>,
    /// Held-out rows of the embedding file: queryable, never returned as neighbours.
    pub held_out: HashMap<String, EmbeddingEntry>,
    pub projection: Option<Vec<ProjectedPoint>>,
    /// Manifest and the directory its image paths are relative to.
    pub manifest: Option<(DatasetManifest, PathBuf)>,
}

impl Snapshot {
    pub fn load(registry_path: &Path) -> Result<Self> {
        let registry = Registry::load(registry_path)?;
        let base = registry_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let entry = registry.active().expect("validated registry has an active model").clone();
        let model = TrainedModel::load(&resolve(&base, &entry.checkpoint))?;
        let mask = match &entry.mask {
            cxr_core::experiments::MaskSource::File { path } => cxr_core::experiments::MaskSource::File {
                path: resolve(&base, path),
            },
            other => other.clone(),
        };
        let pipeline = Pipeline::new(entry.pipeline.clone(), mask.build()?)?;
        let (index, held_out) = match &entry.index {
            Some(p) => {
                let entries = read_entries(&resolve(&base, p))?;
                let held_out = entries
                    .iter()
                    .filter(|e| e.split != Split::Train)
                    .map(|e| (e.scan_id.clone(), e.clone()))
                    .collect();
                (Some(build_index(&entries)?), held_out)
            }
            None => (None, HashMap::new()),
        };
        let projection = match &entry.projection {
            Some(p) => Some(read_projection(&resolve(&base, p))?),
            None => None,
        };
        let manifest = match &entry.manifest {
            Some(p) => {
                let p = resolve(&base, p);
                let dir = p.parent().unwrap_or(Path::new(".")).to_path_buf();
                Some((load_manifest(&p)?, dir))
            }
            None => None,
        };
        tracing::info!(
            model_id = %entry.model_id,
            index = index.as_ref().map_or(0, |i| i.len()),
            projection = projection.as_ref().map_or(0, |p| p.len()),
            "snapshot loaded"
        );
        Ok(Self {
            entry,
            model,
            pipeline,
            index,
            held_out,
            projection,
            manifest,
        })
    }
}

/// A scan classified through the API.
#[derive(Debug, Clone)]
pub struct Upload {
    pub model_id: String,
    pub score: f64,
    pub label: Label,
    pub embedding: Vec<f64>,
    pub png: Arc<Vec<u8>>,
}

#[derive(Default)]
pub struct Uploads {
    next: u64,
    scans: HashMap<String, Upload>,
}

impl Uploads {
    pub fn insert(&mut self, upload: Upload) -> String {
        self.next += 1;
        let id = format!("upload-{:06}", self.next);
        self.scans.insert(id.clone(), upload);
        id
    }

    pub fn get(&self, id: &str) -> Option<&Upload> {
        self.scans.get(id)
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// Drops uploads embedded by a model other than `model_id`.
    pub fn retain_model(&mut self, model_id: &str) {
        self.scans.retain(|_, u| u.model_id == model_id);
    }
}

pub struct AppState {
    pub registry_path: PathBuf,
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    pub uploads: Mutex<Uploads>,
}

impl AppState {
    /// Loads the active model if the registry exists; without one the
    /// service starts and answers 503 until a reload succeeds.
    pub fn open(registry_path: impl Into<PathBuf>) -> Result<Self> {
        let registry_path = registry_path.into();
        let snapshot = if registry_path.exists() {
            Some(Arc::new(Snapshot::load(&registry_path)?))
        } else {
            tracing::warn!(path = %registry_path.display(), "no registry; serving without a model");
            None
        };
        Ok(Self {
            registry_path,
            snapshot: RwLock::new(snapshot),
            uploads: Mutex::new(Uploads::default()),
        })
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().unwrap().clone()
    }

    /// Rebuilds the snapshot from disk and swaps it in. On failure the old
    /// snapshot stays.
    pub fn reload(&self) -> Result<Arc<Snapshot>> {
        let fresh = Arc::new(Snapshot::load(&self.registry_path)?);
        let mut uploads = self.uploads.lock().unwrap();
        uploads.retain_model(&fresh.entry.model_id);
        *self.snapshot.write().unwrap() = Some(fresh.clone());
        Ok(fresh)
    }
}
