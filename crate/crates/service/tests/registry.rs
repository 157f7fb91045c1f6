mod common;

use cxr_core::experiments::MaskSource;
use cxr_core::pipeline::PipelineConfig;
use cxr_service::{ModelRegistryEntry, Registry};

fn entry(id: &str, active: bool) -> ModelRegistryEntry {
    ModelRegistryEntry {
        model_id: id.into(),
        checkpoint: format!("{id}.cxrw").into(),
        model_config: common::model_config(0),
        created: "2026-01-01T00:00:00Z".into(),
        is_active: active,
        threshold: 0.5,
        mask: MaskSource::Constant { value: 0.5 },
        pipeline: PipelineConfig::default(),
        index: None,
        projection: None,
        manifest: None,
    }
}

#[test]
fn exactly_one_active_model() {
    assert!(Registry { models: vec![] }.validate().is_err());
    assert!(Registry {
        models: vec![entry("a", false), entry("b", false)]
    }
    .validate()
    .is_err());
    assert!(Registry {
        models: vec![entry("a", true), entry("b", true)]
    }
    .validate()
    .is_err());
    assert!(Registry {
        models: vec![entry("a", true), entry("b", false)]
    }
    .validate()
    .is_ok());
}

#[test]
fn rejects_duplicates_training_masks_and_bad_thresholds() {
    assert!(Registry {
        models: vec![entry("a", true), entry("a", false)]
    }
    .validate()
    .is_err());
    let mut t = entry("a", true);
    t.mask = MaskSource::default();
    assert!(Registry { models: vec![t] }.validate().is_err());
    let mut th = entry("a", true);
    th.threshold = 1.5;
    assert!(Registry { models: vec![th] }.validate().is_err());
}

#[test]
fn register_and_activate_keep_one_active() {
    let mut reg = Registry::default();
    reg.register(entry("a", true));
    reg.register(entry("b", true));
    assert_eq!(reg.active().unwrap().model_id, "b");
    assert_eq!(reg.models.iter().filter(|m| m.is_active).count(), 1);
    reg.activate("a").unwrap();
    assert_eq!(reg.active().unwrap().model_id, "a");
    assert!(reg.activate("zzz").is_err());
    reg.register(entry("a", true));
    assert_eq!(reg.models.len(), 2);
}

#[test]
fn save_load_round_trip_leaves_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("registry.json");
    let reg = Registry {
        models: vec![entry("a", false), entry("b", true)],
    };
    reg.save(&path).unwrap();
    assert_eq!(Registry::load(&path).unwrap(), reg);
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("registry.json")]);

    let invalid = Registry {
        models: vec![entry("a", false)],
    };
    assert!(invalid.save(&path).is_err());
    assert_eq!(Registry::load(&path).unwrap(), reg);
}

#[test]
fn optional_fields_default_when_absent() {
    let json = serde_json::json!({
        "models": [{
            "model_id": "m",
            "checkpoint": "m.cxrw",
            "model_config": { "backbone_kind": "tiny_test_cnn" },
            "created": "2026-01-01T00:00:00Z",
            "is_active": true
        }]
    });
    let reg: Registry = serde_json::from_value(json).unwrap();
    let m = reg.active().unwrap();
    assert_eq!(m.threshold, 0.5);
    assert_eq!(m.mask, MaskSource::Constant { value: 0.5 });
    assert_eq!(m.model_config.head_layer_widths, [64, 16, 2]);
}
