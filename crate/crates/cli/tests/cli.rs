use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cxr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxr"))
        .args(args)
        .current_dir(dir)
        .env_remove("CXR_DATA_ROOT")
        .env_remove("CXR_OUTPUT_ROOT")
        .env_remove("CXR_CHECKPOINT_DIR")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cxr(dir, args);
    assert!(
        out.status.success(),
        "cxr {args:?} exited {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small enough for a full pipeline run in a test.
const SMALL: &str = r#"
seed = 3
test_fraction = 0.3

[paths]
data_root = "data"
output_root = "out"

[mask]
kind = "constant"
value = 0.5

[model]
backbone_kind = "tiny_test_cnn"
input_pool = 128

[training]
epochs = 2
batch_size = 4

[retrieval]
k = 3

[retrieval.tsne]
perplexity = 3.0
iterations = 250

[bootstrap]
n_train_resamples = 1
n_bootstraps_each = 2

[[comparison.models]]
backbone_kind = "tiny_test_cnn"
input_pool = 128
"#;

fn small_project() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cxr.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = cxr(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(cxr(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(cxr(dir.path(), &["split", "--seed", "abc"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = cxr(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["ingest", "split", "train", "evaluate", "compare", "bootstrap", "index", "project", "report", "serve"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = \"many\"\n").unwrap();
    let out = cxr(dir.path(), &["--config", cfg.to_str().unwrap(), "split"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));

    std::fs::write(&cfg, "test_fraction = 1.5\n").unwrap();
    assert_eq!(cxr(dir.path(), &["--config", cfg.to_str().unwrap(), "split"]).status.code(), Some(1));
    assert_eq!(cxr(dir.path(), &["--config", "missing.toml", "split"]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_exits_two() {
    let (dir, cfg) = small_project();
    let c = cfg.to_str().unwrap();
    let out = cxr(dir.path(), &["--config", c, "evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoint"));
    let out = cxr(dir.path(), &["--config", c, "ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn split_is_reproducible_for_a_seed() {
    let (dir, cfg) = small_project();
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "synth", "--patients", "10"]);
    ok(dir.path(), &["--config", c, "ingest"]);
    let split = dir.path().join("out/split.json");
    ok(dir.path(), &["--config", c, "split", "--seed", "7"]);
    let first = std::fs::read(&split).unwrap();
    ok(dir.path(), &["--config", c, "split", "--seed", "7"]);
    assert_eq!(std::fs::read(&split).unwrap(), first);
    ok(dir.path(), &["--config", c, "split", "--seed", "8"]);
    let other: serde_json::Value = serde_json::from_slice(&std::fs::read(&split).unwrap()).unwrap();
    let first: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(
        other["train_ids"].as_array().unwrap().len() + other["test_ids"].as_array().unwrap().len(),
        first["train_ids"].as_array().unwrap().len() + first["test_ids"].as_array().unwrap().len()
    );
}

#[test]
fn output_root_environment_override() {
    let (dir, cfg) = small_project();
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "synth", "--patients", "4"]);
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_cxr"))
        .args(["--config", c, "ingest"])
        .current_dir(dir.path())
        .env("CXR_OUTPUT_ROOT", &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(elsewhere.join("manifest.csv").exists());
    assert!(!dir.path().join("out/manifest.csv").exists());
}

#[test]
fn full_pipeline_writes_reports_and_registry() {
    let (dir, cfg) = small_project();
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    for step in ["ingest", "split", "preprocess", "train", "evaluate", "embed", "index", "project", "compare", "bootstrap", "report"] {
        if step == "ingest" {
            ok(d, &["--config", c, "synth", "--patients", "8"]);
        }
        ok(d, &["--config", c, step]);
    }
    let out = d.join("out");
    assert!(out.join("canonical/cache.json").exists());
    assert!(out.join("checkpoints/final.cxrw").exists());
    for f in ["evaluation.json", "roc.tsv", "pr.tsv", "histogram.tsv", "predictions.tsv"] {
        assert!(out.join("evaluation").join(f).exists(), "evaluation/{f}");
    }
    let preds = std::fs::read_to_string(out.join("evaluation/predictions.tsv")).unwrap();
    let split: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("split.json")).unwrap()).unwrap();
    let test_patients = split["test_ids"].as_array().unwrap().len();
    assert!(test_patients > 0);
    assert!(preds.lines().count() > test_patients, "one row per test scan plus header");

    let report = out.join("report");
    let names: Vec<String> = std::fs::read_dir(&report)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n == "comparison.tsv"), "{names:?}");
    for prefix in ["roc_", "pr_", "histogram_"] {
        assert!(names.iter().any(|n| n.starts_with(prefix) && n.ends_with(".tsv")), "{prefix}*.tsv in {names:?}");
        assert!(names.iter().any(|n| n.starts_with(prefix) && n.ends_with(".svg")), "{prefix}*.svg in {names:?}");
    }
    assert!(names.iter().any(|n| n == "tsne.svg"));
    let svg = std::fs::read_to_string(report.join("tsne.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(report.join("evaluation/roc_model.svg").exists());

    let boot = std::fs::read_to_string(out.join("bootstrap.tsv")).unwrap();
    assert_eq!(boot.lines().count(), 6);

    let reg: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("registry.json")).unwrap()).unwrap();
    let models = reg["models"].as_array().unwrap();
    assert_eq!(models.len(), 1);
    assert_eq!(models[0]["model_id"], "tiny_test_cnn-seed3");
    assert!(models[0]["index"].as_str().unwrap().ends_with("embeddings.tsv"));
    assert!(models[0]["projection"].as_str().unwrap().ends_with("projection.json"));
}
