use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use cxr_core::dataset::{apply_exclusions, load_manifest, patient_level_split, write_manifest, DatasetManifest, Label, SplitAssignment};
use cxr_core::experiments::{embed_scans, emit_report, file_stem, run_comparison, split_hash, ComparisonResult, ExperimentSpec, MaskSource};
use cxr_core::imaging::{write_atomic, CanonicalImage};
use cxr_core::metrics::{bootstrap_cis, evaluate, fmt_sig9, BootstrapOptions, BootstrapProtocol, EvaluationReport, Metric};
use cxr_core::model::{build_model, classify, train, TrainedModel};
use cxr_core::pipeline::{canonicalize_records, CanonicalScan, Pipeline, ScanSource};
use cxr_core::retrieval::{
    build_index, class_distance_stats, neighbor_vote, project_entries, query_knn, read_entries, read_projection, write_entries,
    write_projection, EmbeddingEntry, Split,
};
use cxr_core::segmentation::{train_mask_model, ConstantMask, MaskModel};
use cxr_core::synth::{write_dataset, SynthDatasetSpec};
use cxr_service::{AppState, ModelRegistryEntry, Registry};
use serde::{Deserialize, Serialize};

use crate::config::CliConfig;
use crate::plots;

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    write_atomic(path, text.as_bytes())?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<PathBuf> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Fails with a pointer to the command that produces `path`.
fn require(path: &Path, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {}; run `cxr {producer}` first", path.display());
    }
    Ok(())
}

pub fn synth(cfg: &CliConfig, patients: usize, images_per_patient: usize) -> Result<()> {
    let spec = SynthDatasetSpec {
        n_patients: patients,
        images_per_patient,
        seed: cfg.seed,
        ..SynthDatasetSpec::default()
    };
    let root = &cfg.paths.data_root;
    let manifest = write_dataset(root, &spec)?;
    let target = cfg.manifest_path();
    if target != root.join("manifest.csv") {
        write_manifest(&manifest, &target)?;
    }
    tracing::info!(images = manifest.len(), manifest = %target.display(), "synthetic dataset written");
    Ok(())
}

/// Ingested manifest under the output root, with absolute image paths.
fn ingested(cfg: &CliConfig) -> Result<DatasetManifest> {
    let p = cfg.out("manifest.csv");
    require(&p, "ingest")?;
    Ok(load_manifest(&p)?)
}

pub fn ingest(cfg: &CliConfig) -> Result<()> {
    let src = cfg.manifest_path();
    if !src.exists() {
        bail!("manifest {} not found (set paths.data_root or CXR_DATA_ROOT)", src.display());
    }
    let manifest = load_manifest(&src)?;
    let base = src.parent().unwrap_or(Path::new("."));
    let (mut kept, log) = apply_exclusions(&manifest);
    for r in &mut kept.records {
        let p = DatasetManifest::resolve_image_path(r, base);
        r.image_path = std::path::absolute(&p).unwrap_or(p);
    }
    ensure_dir(&cfg.paths.output_root)?;
    write_manifest(&kept, cfg.out("manifest.csv"))?;
    write_json(&cfg.out("exclusions.json"), &log)?;
    tracing::info!(kept = kept.len(), excluded = log.len(), "ingested");
    Ok(())
}

pub fn split(cfg: &CliConfig) -> Result<()> {
    let manifest = ingested(cfg)?;
    let split = patient_level_split(&manifest, cfg.test_fraction, cfg.seed)?;
    split.save(cfg.out("split.json"))?;
    tracing::info!(
        train = split.train_ids.len(),
        test = split.test_ids.len(),
        hash = %split_hash(&split.train_ids, &split.test_ids),
        "split written"
    );
    Ok(())
}

fn load_split(cfg: &CliConfig) -> Result<SplitAssignment> {
    let p = cfg.out("split.json");
    require(&p, "split")?;
    Ok(SplitAssignment::load(p)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheKey {
    preprocess: cxr_core::preprocess::PreprocessConfig,
    preprocessing_enabled: bool,
}

fn cache_key(cfg: &CliConfig) -> CacheKey {
    CacheKey {
        preprocess: cfg.preprocess,
        preprocessing_enabled: cfg.preprocessing_enabled,
    }
}

fn cache_file(dir: &Path, scan_id: &str) -> PathBuf {
    dir.join(format!("{}.cxrc", file_stem(scan_id)))
}

pub fn preprocess(cfg: &CliConfig) -> Result<()> {
    let manifest = ingested(cfg)?;
    let split = load_split(cfg)?;
    // Canonicalization never consults the mask model.
    let pipeline = Pipeline::new(cfg.pipeline_config(cfg.preprocessing_enabled), Arc::new(ConstantMask { value: 0.0, size: 1 }))?;
    let dir = cfg.out("canonical");
    ensure_dir(&dir)?;
    let ids: BTreeSet<String> = split.train_ids.union(&split.test_ids).cloned().collect();
    let scans = canonicalize_records(&pipeline, Path::new("."), manifest.subset(&ids))?;
    for s in &scans {
        s.image.save(cache_file(&dir, &s.scan_id))?;
    }
    write_json(&dir.join("cache.json"), &cache_key(cfg))?;
    tracing::info!(images = scans.len(), dir = %dir.display(), "canonical images written");
    Ok(())
}

/// Canonical scans for `ids`, from the `preprocess` cache when it matches.
fn canonical_scans(cfg: &CliConfig, pipeline: &Pipeline, manifest: &DatasetManifest, ids: &BTreeSet<String>) -> Result<Vec<CanonicalScan>> {
    let dir = cfg.out("canonical");
    let key = dir.join("cache.json");
    let cached = key.exists() && read_json::<CacheKey>(&key).ok() == Some(cache_key(cfg));
    if cached && pipeline.config.preprocessing_enabled == cfg.preprocessing_enabled {
        let hits: Option<Vec<CanonicalScan>> = manifest
            .subset(ids)
            .map(|r| {
                CanonicalImage::load(cache_file(&dir, &r.scan_id)).ok().map(|img| CanonicalScan {
                    scan_id: r.scan_id.clone(),
                    label: r.label,
                    image: Arc::new(img),
                })
            })
            .collect();
        if let Some(scans) = hits {
            tracing::info!(images = scans.len(), "using canonical cache");
            return Ok(scans);
        }
    }
    Ok(canonicalize_records(pipeline, Path::new("."), manifest.subset(ids))?)
}

/// What `train` leaves next to the checkpoint for later commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainedMeta {
    model_id: String,
    mask: MaskSource,
    pipeline: cxr_core::pipeline::PipelineConfig,
    split_hash: String,
}

/// Builds the mask model; a trained one is saved under the checkpoint dir so
/// later commands reuse it.
fn resolve_mask(cfg: &CliConfig) -> Result<(MaskSource, Arc<dyn MaskModel>)> {
    match &cfg.mask {
        MaskSource::Train(mc) => {
            let dir = cfg.checkpoint_dir();
            ensure_dir(&dir)?;
            let (model, losses) = train_mask_model(mc)?;
            let path = dir.join("mask.cxrw");
            model.save(&path)?;
            tracing::info!(final_loss = losses.last().copied(), path = %path.display(), "mask model trained");
            let src = MaskSource::File { path };
            Ok((src.clone(), src.build()?))
        }
        other => Ok((other.clone(), other.build()?)),
    }
}

pub fn train_cmd(cfg: &CliConfig) -> Result<()> {
    let manifest = ingested(cfg)?;
    let split = load_split(cfg)?;
    let (mask_src, mask) = resolve_mask(cfg)?;
    let pipeline = Pipeline::new(cfg.pipeline_config(cfg.preprocessing_enabled), mask)?;
    let scans = canonical_scans(cfg, &pipeline, &manifest, &split.train_ids)?;
    let dir = cfg.checkpoint_dir();
    ensure_dir(&dir)?;
    let source = ScanSource {
        pipeline: &pipeline,
        scans: &scans,
    };
    let model = train(build_model(cfg.model.clone())?, &source, &cfg.training, Some(&dir))?;
    let ckpt = dir.join("final.cxrw");
    model.save(&ckpt)?;
    let model_id = format!("{}-seed{}", cfg.model.backbone_kind, cfg.seed);
    let meta = TrainedMeta {
        model_id: model_id.clone(),
        mask: mask_src.clone(),
        pipeline: pipeline.config.clone(),
        split_hash: split_hash(&split.train_ids, &split.test_ids),
    };
    write_json(&dir.join("model.json"), &meta)?;

    let reg_path = cfg.out("registry.json");
    let mut registry = if reg_path.exists() { Registry::load(&reg_path)? } else { Registry::default() };
    registry.register(ModelRegistryEntry {
        model_id: model_id.clone(),
        checkpoint: std::path::absolute(&ckpt)?,
        model_config: cfg.model.clone(),
        created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        is_active: true,
        threshold: cfg.threshold,
        mask: absolute_mask(mask_src)?,
        pipeline: pipeline.config.clone(),
        index: None,
        projection: None,
        manifest: Some(std::path::absolute(cfg.out("manifest.csv"))?),
    });
    registry.save(&reg_path)?;
    let last = model.training_log.last();
    tracing::info!(
        %model_id,
        epochs = model.training_log.len(),
        final_loss = last.map(|l| l.loss),
        train_acc = last.map(|l| l.train_acc),
        "model trained and registered"
    );
    Ok(())
}

fn absolute_mask(m: MaskSource) -> Result<MaskSource> {
    Ok(match m {
        MaskSource::File { path } => MaskSource::File {
            path: std::path::absolute(path)?,
        },
        other => other,
    })
}

struct Trained {
    model: TrainedModel,
    pipeline: Pipeline,
    meta: TrainedMeta,
}

fn load_trained(cfg: &CliConfig) -> Result<Trained> {
    let dir = cfg.checkpoint_dir();
    let ckpt = dir.join("final.cxrw");
    if !ckpt.exists() {
        bail!("no checkpoint at {}; run `cxr train` first", ckpt.display());
    }
    let meta: TrainedMeta = read_json(&dir.join("model.json"))?;
    let model = TrainedModel::load(&ckpt)?;
    let pipeline = Pipeline::new(meta.pipeline.clone(), meta.mask.build()?)?;
    Ok(Trained { model, pipeline, meta })
}

fn write_evaluation(dir: &Path, report: &EvaluationReport, rows: &[(String, f64, Label, Label)]) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut files = vec![write_json(&dir.join("evaluation.json"), report)?];
    if let Some(c) = &report.roc {
        files.push(write_text(&dir.join("roc.tsv"), &c.to_tsv())?);
    }
    if let Some(c) = &report.pr {
        files.push(write_text(&dir.join("pr.tsv"), &c.to_tsv())?);
    }
    files.push(write_text(&dir.join("histogram.tsv"), &report.histogram.to_tsv())?);
    let mut preds = String::from("scan_id\ttruth\tscore\tpredicted\n");
    for (id, score, truth, pred) in rows {
        writeln!(preds, "{id}\t{truth}\t{}\t{pred}", fmt_sig9(*score)).unwrap();
    }
    files.push(write_text(&dir.join("predictions.tsv"), &preds)?);
    Ok(files)
}

pub fn evaluate_cmd(cfg: &CliConfig) -> Result<()> {
    let t = load_trained(cfg)?;
    let manifest = ingested(cfg)?;
    let split = load_split(cfg)?;
    if split_hash(&split.train_ids, &split.test_ids) != t.meta.split_hash {
        tracing::warn!("split changed since the model was trained");
    }
    let scans = canonical_scans(cfg, &t.pipeline, &manifest, &split.test_ids)?;
    let mut rows = Vec::with_capacity(scans.len());
    for s in &scans {
        let inf = t.model.infer(&t.pipeline.inference_input(&s.image)?)?;
        rows.push((s.scan_id.clone(), inf.score.score, s.label, classify(&inf.score, cfg.threshold)));
    }
    let scores: Vec<(f64, Label)> = rows.iter().map(|r| (r.1, r.2)).collect();
    let report = evaluate(&scores, cfg.threshold)?;
    write_evaluation(&cfg.out("evaluation"), &report, &rows)?;
    let c = &report.confusion;
    println!(
        "{}: accuracy {}, sensitivity {}, specificity {}, ROC AUC {}",
        t.meta.model_id,
        cxr_core::experiments::format_cell(c.tp + c.tn, c.total()),
        cxr_core::experiments::format_cell(c.tp, c.positives()),
        cxr_core::experiments::format_cell(c.tn, c.negatives()),
        report.roc.as_ref().map_or("undefined".into(), |r| format!("{:.3}", r.auc))
    );
    Ok(())
}

pub fn compare(cfg: &CliConfig) -> Result<()> {
    let manifest = cfg.out("manifest.csv");
    require(&manifest, "ingest")?;
    let out = cfg.out("compare");
    let spec = ExperimentSpec {
        manifest,
        split_seed: cfg.seed,
        test_fraction: cfg.test_fraction,
        models: cfg.comparison.models.clone(),
        training: cfg.training.clone(),
        preprocessing_enabled: cfg.preprocessing_enabled,
        ablation: cfg.comparison.ablation,
        output_dir: out.clone(),
        pipeline: cfg.pipeline_config(cfg.preprocessing_enabled),
        mask: cfg.mask.clone(),
        threshold: cfg.threshold,
        retrieval: cfg.retrieval.clone(),
    };
    let result = run_comparison(&spec)?;
    ensure_dir(&out)?;
    write_json(&out.join("comparison.json"), &result)?;
    print!("{}", result.table.to_tsv());
    Ok(())
}

pub fn bootstrap(cfg: &CliConfig) -> Result<()> {
    let manifest = ingested(cfg)?;
    let (_, mask) = resolve_mask(cfg)?;
    let pipeline = Pipeline::new(cfg.pipeline_config(cfg.preprocessing_enabled), mask)?;
    let runner = |m: &DatasetManifest, split: &SplitAssignment, r: usize| -> cxr_core::Result<Vec<(f64, Label)>> {
        let train_scans = canonicalize_records(&pipeline, Path::new("."), m.subset(&split.train_ids))?;
        let test_scans = canonicalize_records(&pipeline, Path::new("."), m.subset(&split.test_ids))?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.init_seed = cfg.model.init_seed.wrapping_add(r as u64);
        let mut training = cfg.training.clone();
        training.global_seed = cfg.seed.wrapping_add(r as u64);
        let source = ScanSource {
            pipeline: &pipeline,
            scans: &train_scans,
        };
        let model = train(build_model(model_cfg)?, &source, &training, None)?;
        let mut out = Vec::with_capacity(test_scans.len());
        for s in &test_scans {
            out.push((model.infer(&pipeline.inference_input(&s.image)?)?.score.score, s.label));
        }
        tracing::info!(resplit = r, test = out.len(), "bootstrap split scored");
        Ok(out)
    };
    let opts = BootstrapOptions {
        protocol: BootstrapProtocol {
            n_train_resamples: cfg.bootstrap.n_train_resamples,
            n_bootstraps_each: cfg.bootstrap.n_bootstraps_each,
        },
        test_fraction: cfg.test_fraction,
        seed: cfg.seed,
        confidence: cfg.bootstrap.confidence,
        threshold: cfg.threshold,
    };
    let metrics = [Metric::Accuracy, Metric::Sensitivity, Metric::Specificity, Metric::RocAuc, Metric::PrAuc];
    let cis = bootstrap_cis(&runner, &manifest, &metrics, &opts)?;
    ensure_dir(&cfg.paths.output_root)?;
    write_json(&cfg.out("bootstrap.json"), &cis)?;
    let mut t = String::from("metric\tpoint_estimate\tlower\tupper\tconfidence\tvalues\n");
    for ci in &cis {
        writeln!(
            t,
            "{}\t{}\t{}\t{}\t{}\t{}",
            ci.metric_name.as_str(),
            fmt_sig9(ci.point_estimate),
            fmt_sig9(ci.lower),
            fmt_sig9(ci.upper),
            ci.confidence,
            ci.values.len()
        )
        .unwrap();
    }
    write_text(&cfg.out("bootstrap.tsv"), &t)?;
    print!("{t}");
    Ok(())
}

pub fn embed(cfg: &CliConfig) -> Result<()> {
    let t = load_trained(cfg)?;
    let manifest = ingested(cfg)?;
    let split = load_split(cfg)?;
    let train_scans = canonical_scans(cfg, &t.pipeline, &manifest, &split.train_ids)?;
    let test_scans = canonical_scans(cfg, &t.pipeline, &manifest, &split.test_ids)?;
    let entries = embed_scans(&t.model, &t.pipeline, &train_scans, &test_scans)?;
    ensure_dir(&cfg.paths.output_root)?;
    write_entries(&cfg.out("embeddings.tsv"), &entries)?;
    tracing::info!(entries = entries.len(), dim = t.model.embedding_dim, "embeddings written");
    Ok(())
}

fn embeddings(cfg: &CliConfig) -> Result<Vec<EmbeddingEntry>> {
    let p = cfg.out("embeddings.tsv");
    require(&p, "embed")?;
    Ok(read_entries(&p)?)
}

/// Points the active registry entry at `f`'s artifact, when a registry exists.
fn update_registry(cfg: &CliConfig, f: impl FnOnce(&mut ModelRegistryEntry)) -> Result<()> {
    let p = cfg.out("registry.json");
    if !p.exists() {
        tracing::warn!("no registry; run `cxr train` to register a model");
        return Ok(());
    }
    let mut reg = Registry::load(&p)?;
    let active = reg.models.iter_mut().find(|m| m.is_active).ok_or_else(|| anyhow!("registry has no active model"))?;
    f(active);
    reg.save(&p)?;
    Ok(())
}

pub fn index(cfg: &CliConfig) -> Result<()> {
    let entries = embeddings(cfg)?;
    let index = build_index(&entries)?;
    index.save(&cfg.out("index.tsv"))?;
    let test: Vec<EmbeddingEntry> = entries.iter().filter(|e| e.split == Split::Test).cloned().collect();
    let k = cfg.retrieval.k;
    let mut rows = String::from("query_id\tquery_label\trank\tneighbor_id\tneighbor_label\tdistance\n");
    let mut correct = 0;
    for q in &test {
        let res = query_knn(&index, &q.vector, k)?;
        for (rank, n) in res.neighbors.iter().enumerate() {
            writeln!(rows, "{}\t{}\t{}\t{}\t{}\t{}", q.scan_id, q.label, rank + 1, n.scan_id, n.label, fmt_sig9(n.distance)).unwrap();
        }
        if neighbor_vote(&res)?.0 == q.label {
            correct += 1;
        }
    }
    write_text(&cfg.out("neighbors.tsv"), &rows)?;
    if !test.is_empty() {
        let stats = class_distance_stats(&index, &test)?;
        write_json(&cfg.out("distance_stats.json"), &stats)?;
        println!(
            "neighbour vote (k={k}): {} of {} test scans correct; train-test distance {}",
            correct,
            test.len(),
            stats.overall.map_or("undefined".into(), |o| format!("{:.3} +/- {:.3}", o.mean, o.std))
        );
    }
    let path = std::path::absolute(cfg.out("embeddings.tsv"))?;
    update_registry(cfg, |e| e.index = Some(path))?;
    tracing::info!(indexed = index.len(), queries = test.len(), "index built");
    Ok(())
}

pub fn project(cfg: &CliConfig) -> Result<()> {
    let entries = embeddings(cfg)?;
    let (points, res) = project_entries(&entries, &cfg.retrieval.tsne)?;
    let proj = cfg.out("projection.json");
    write_projection(&proj, &points)?;
    let mut t = String::from("scan_id\tlabel\tx\ty\n");
    for p in &points {
        writeln!(t, "{}\t{}\t{}\t{}", p.scan_id, p.label, fmt_sig9(p.xy[0]), fmt_sig9(p.xy[1])).unwrap();
    }
    write_text(&cfg.out("tsne.tsv"), &t)?;
    let path = std::path::absolute(&proj)?;
    update_registry(cfg, |e| e.projection = Some(path))?;
    tracing::info!(points = points.len(), kl_initial = res.kl_initial, kl_final = res.kl_final, "projection written");
    Ok(())
}

pub fn report(cfg: &CliConfig) -> Result<()> {
    let dir = cfg.out("report");
    let mut files: Vec<PathBuf> = Vec::new();
    let comparison = cfg.out("compare").join("comparison.json");
    if comparison.exists() {
        let result: ComparisonResult = read_json(&comparison)?;
        ensure_dir(&dir)?;
        files.extend(emit_report(&result, &dir)?);
        for m in result.models.iter().chain(&result.ablation) {
            files.extend(plots::evaluation(&dir, &file_stem(&m.name), &m.name, &m.report)?);
        }
        if let Some(points) = result.retrieval.as_ref().and_then(|r| r.projection.as_ref()) {
            files.push(plots::projection(&dir.join("tsne_comparison.svg"), points)?);
        }
    }
    let evaluation = cfg.out("evaluation").join("evaluation.json");
    if evaluation.exists() {
        let report: EvaluationReport = read_json(&evaluation)?;
        let eval_dir = dir.join("evaluation");
        ensure_dir(&eval_dir)?;
        for name in ["roc.tsv", "pr.tsv", "histogram.tsv", "predictions.tsv", "evaluation.json"] {
            let src = cfg.out("evaluation").join(name);
            if src.exists() {
                let dst = eval_dir.join(name);
                std::fs::copy(&src, &dst).with_context(|| format!("copying {}", src.display()))?;
                files.push(dst);
            }
        }
        files.extend(plots::evaluation(&eval_dir, "model", "trained model", &report)?);
    }
    let projection = cfg.out("projection.json");
    if projection.exists() {
        ensure_dir(&dir)?;
        files.push(plots::projection(&dir.join("tsne.svg"), &read_projection(&projection)?)?);
        let src = cfg.out("tsne.tsv");
        if src.exists() {
            std::fs::copy(&src, dir.join("tsne.tsv"))?;
        }
    }
    if files.is_empty() {
        bail!("nothing to report; run `cxr evaluate`, `cxr compare` or `cxr project` first");
    }
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

pub fn serve(cfg: &CliConfig, addr: Option<String>) -> Result<()> {
    let addr: std::net::SocketAddr = addr.unwrap_or_else(|| cfg.serve.addr.clone()).parse().context("invalid listen address")?;
    let state = Arc::new(AppState::open(cfg.out("registry.json"))?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(cxr_service::serve(addr, state))?;
    Ok(())
}
