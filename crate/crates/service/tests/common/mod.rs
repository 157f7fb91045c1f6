#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use cxr_core::dataset::DatasetManifest;
use cxr_core::experiments::{embed_scans, MaskSource};
use cxr_core::model::{build_model, BackboneKind, ModelConfig};
use cxr_core::pipeline::{canonicalize_records, Pipeline, PipelineConfig};
use cxr_core::retrieval::{project_entries, write_entries, write_projection, EmbeddingEntry, TsneConfig};
use cxr_core::synth::{write_dataset, SynthDatasetSpec};
use cxr_service::{AppState, ModelRegistryEntry, Registry};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub registry: PathBuf,
    pub manifest: DatasetManifest,
    pub entries: Vec<EmbeddingEntry>,
}

impl Fixture {
    pub fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    pub fn image_bytes(&self, i: usize) -> Vec<u8> {
        std::fs::read(self.data().join(&self.manifest.records[i].image_path)).unwrap()
    }

    pub fn app(&self) -> (Arc<AppState>, Router) {
        let st = Arc::new(AppState::open(&self.registry).unwrap());
        (st.clone(), cxr_service::router(st))
    }
}

pub fn model_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::new(BackboneKind::TinyTestCnn);
    cfg.input_pool = Some(128);
    cfg.init_seed = seed;
    cfg
}

fn entry(id: &str, checkpoint: &str, seed: u64, active: bool, projection: bool) -> ModelRegistryEntry {
    ModelRegistryEntry {
        model_id: id.into(),
        checkpoint: checkpoint.into(),
        model_config: model_config(seed),
        created: "2026-01-01T00:00:00Z".into(),
        is_active: active,
        threshold: 0.5,
        mask: MaskSource::Constant { value: 0.5 },
        pipeline: PipelineConfig::default(),
        index: Some("embeddings.tsv".into()),
        projection: projection.then(|| "projection.json".into()),
        manifest: Some("data/manifest.csv".into()),
    }
}

/// Eight synthetic patients (16 scans), an untrained tiny model `model-a`
/// (active) and `model-b`, embeddings for 12 train and 4 test scans.
pub fn fixture(with_projection: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = write_dataset(
        &data,
        &SynthDatasetSpec {
            n_patients: 8,
            ..SynthDatasetSpec::default()
        },
    )
    .unwrap();
    let model = build_model(model_config(0)).unwrap();
    model.save(&dir.path().join("model_a.cxrw")).unwrap();
    build_model(model_config(1)).unwrap().save(&dir.path().join("model_b.cxrw")).unwrap();

    let pipeline = Pipeline::new(PipelineConfig::default(), MaskSource::Constant { value: 0.5 }.build().unwrap()).unwrap();
    let scans = canonicalize_records(&pipeline, &data, &manifest.records).unwrap();
    let entries = embed_scans(&model, &pipeline, &scans[..12], &scans[12..]).unwrap();
    write_entries(&dir.path().join("embeddings.tsv"), &entries).unwrap();
    if with_projection {
        let cfg = TsneConfig {
            perplexity: 3.0,
            iterations: 300,
            ..TsneConfig::default()
        };
        let (points, _) = project_entries(&entries, &cfg).unwrap();
        write_projection(&dir.path().join("projection.json"), &points).unwrap();
    }
    let registry = dir.path().join("registry.json");
    Registry {
        models: vec![
            entry("model-a", "model_a.cxrw", 0, true, with_projection),
            entry("model-b", "model_b.cxrw", 1, false, with_projection),
        ],
    }
    .save(&registry)
    .unwrap();
    Fixture {
        dir,
        registry,
        manifest,
        entries,
    }
}

pub async fn send(app: &Router, method: Method, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, Method::GET, uri, Vec::new()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

pub async fn post(app: &Router, uri: &str, body: Vec<u8>) -> (StatusCode, Value) {
    let (s, b) = send(app, Method::POST, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

/// Validates `v` against a schema in `schemas/`. Covers the keywords those
/// schemas use: type, enum, required, properties, additionalProperties,
/// items, minItems, maxItems, minimum, maximum, minLength.
pub fn assert_schema(name: &str, v: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let mut errors = Vec::new();
    check(&schema, v, "$", &mut errors);
    assert!(errors.is_empty(), "{name}: {errors:?}\n{v:#}");
}

fn type_ok(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_i64() || v.is_u64(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        other => panic!("unsupported type {other}"),
    }
}

fn check(s: &Value, v: &Value, at: &str, errors: &mut Vec<String>) {
    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(t) => type_ok(t, v),
            Value::Array(ts) => ts.iter().any(|t| type_ok(t.as_str().unwrap(), v)),
            _ => panic!("bad type keyword"),
        };
        if !ok {
            errors.push(format!("{at}: expected type {t}"));
            return;
        }
    }
    if let Some(Value::Array(options)) = s.get("enum") {
        if !options.contains(v) {
            errors.push(format!("{at}: {v} not in enum"));
        }
    }
    if let Some(x) = v.as_f64() {
        if s.get("minimum").and_then(Value::as_f64).is_some_and(|m| x < m) {
            errors.push(format!("{at}: {x} below minimum"));
        }
        if s.get("maximum").and_then(Value::as_f64).is_some_and(|m| x > m) {
            errors.push(format!("{at}: {x} above maximum"));
        }
    }
    if let (Some(st), Some(n)) = (v.as_str(), s.get("minLength").and_then(Value::as_u64)) {
        if (st.chars().count() as u64) < n {
            errors.push(format!("{at}: string too short"));
        }
    }
    if let Value::Object(map) = v {
        for r in s.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !map.contains_key(r.as_str().unwrap()) {
                errors.push(format!("{at}: missing {r}"));
            }
        }
        let props = s.get("properties").and_then(Value::as_object);
        for (k, val) in map {
            match props.and_then(|p| p.get(k)) {
                Some(ps) => check(ps, val, &format!("{at}.{k}"), errors),
                None if s.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    errors.push(format!("{at}: unexpected property {k}"))
                }
                None => {}
            }
        }
    }
    if let Value::Array(items) = v {
        if s.get("minItems").and_then(Value::as_u64).is_some_and(|m| (items.len() as u64) < m) {
            errors.push(format!("{at}: too few items"));
        }
        if s.get("maxItems").and_then(Value::as_u64).is_some_and(|m| (items.len() as u64) > m) {
            errors.push(format!("{at}: too many items"));
        }
        if let Some(is) = s.get("items") {
            for (i, item) in items.iter().enumerate() {
                check(is, item, &format!("{at}[{i}]"), errors);
            }
        }
    }
}
