//! Backbone comparison on one shared split, majority-vote ensemble, and the
//! plot-ready report bundle.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{apply_exclusions, load_manifest, patient_level_split, Label, SplitAssignment, DEFAULT_TEST_FRACTION};
use crate::error::{Error, Result};
use crate::imaging::write_atomic;
use crate::metrics::{evaluate, fmt_sig9, ConfusionMatrix, EvaluationReport};
use crate::model::{build_model, classify, majority_vote, train, ModelConfig, TrainedModel, TrainingConfig};
use crate::pipeline::{canonicalize_records, CanonicalScan, Pipeline, PipelineConfig, ScanSource};
use crate::retrieval::{
    build_index, class_distance_stats, neighbor_vote, project_entries, query_knn, DistanceStats, EmbeddingEntry,
    ProjectedPoint, Split, TsneConfig, DEFAULT_K,
};
use crate::segmentation::{train_mask_model, ConstantMask, MaskModel, MaskTrainConfig, UNetMaskModel};

/// Where the lung-mask channel comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSource {
    Constant { value: f32 },
    /// Train a small mask model on generated ellipses.
    Train(MaskTrainConfig),
    File { path: PathBuf },
}

impl Default for MaskSource {
    fn default() -> Self {
        MaskSource::Train(MaskTrainConfig::default())
    }
}

impl MaskSource {
    pub fn build(&self) -> Result<Arc<dyn MaskModel>> {
        Ok(match self {
            MaskSource::Constant { value } => Arc::new(ConstantMask { value: *value, size: 32 }),
            MaskSource::Train(cfg) => Arc::new(train_mask_model(cfg)?.0),
            MaskSource::File { path } => Arc::new(UNetMaskModel::load(path)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub tsne: TsneConfig,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            tsne: TsneConfig::default(),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_threshold() -> f64 {
    0.5
}

fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub manifest: PathBuf,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub models: Vec<ModelConfig>,
    #[serde(default = "TrainingConfig::desk")]
    pub training: TrainingConfig,
    #[serde(default = "default_true")]
    pub preprocessing_enabled: bool,
    /// Adds a "No preprocessing" row for the first model.
    #[serde(default)]
    pub ablation: bool,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub mask: MaskSource,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::InvalidArgument("experiment needs at least one model".into()));
        }
        for m in &self.models {
            m.validate()?;
        }
        self.training.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    fn pipeline_config(&self, preprocessing_enabled: bool) -> PipelineConfig {
        PipelineConfig {
            preprocessing_enabled,
            global_seed: self.training.global_seed,
            ..self.pipeline.clone()
        }
    }
}

/// SHA-256 over the sorted train ids, a separator, then the sorted test ids.
pub fn split_hash(train_ids: &BTreeSet<String>, test_ids: &BTreeSet<String>) -> String {
    let mut h = Sha256::new();
    for id in train_ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    h.update([1u8]);
    for id in test_ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPrediction {
    pub scan_id: String,
    pub truth: Label,
    pub score: f64,
    pub predicted: Label,
}

/// One trained model's test-set outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub name: String,
    pub config: ModelConfig,
    pub preprocessing_enabled: bool,
    pub split_hash: String,
    pub predictions: Vec<ScanPrediction>,
    pub report: EvaluationReport,
}

impl ModelOutcome {
    pub fn scores(&self) -> Vec<(f64, Label)> {
        self.predictions.iter().map(|p| (p.score, p.truth)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Model,
    Ablation,
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub kind: RowKind,
    pub confusion: ConfusionMatrix,
}

/// `"89.7 (314 of 350)"`, percentage truncated to one decimal; a zero
/// denominator prints as `undefined (0 of 0)`.
pub fn format_cell(num: u64, den: u64) -> String {
    if den == 0 {
        return "undefined (0 of 0)".into();
    }
    let tenths = 1000 * num / den;
    format!("{}.{} ({num} of {den})", tenths / 10, tenths % 10)
}

impl ComparisonRow {
    pub fn cells(&self) -> [String; 3] {
        let c = &self.confusion;
        [
            format_cell(c.tp + c.tn, c.total()),
            format_cell(c.tp, c.positives()),
            format_cell(c.tn, c.negatives()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("Model\tAccuracy\tSensitivity\tSpecificity\n");
        for r in &self.rows {
            let [a, b, c] = r.cells();
            writeln!(s, "{}\t{a}\t{b}\t{c}", r.name).unwrap();
        }
        s
    }
}

/// Per-image majority vote over the models' predicted labels; every model
/// must cover the same scans in the same order.
pub fn vote_predictions(models: &[&ModelOutcome]) -> Result<Vec<(String, Label, Label)>> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("vote needs at least one model".into()))?;
    let mut out = Vec::with_capacity(first.predictions.len());
    for (i, p) in first.predictions.iter().enumerate() {
        let mut labels = Vec::with_capacity(models.len());
        for m in models {
            let q = m.predictions.get(i).filter(|q| q.scan_id == p.scan_id).ok_or_else(|| {
                Error::InvalidArgument(format!("model {} does not cover scan {} in order", m.name, p.scan_id))
            })?;
            labels.push(q.predicted);
        }
        out.push((p.scan_id.clone(), p.truth, majority_vote(&labels)?));
    }
    Ok(out)
}

/// Model rows in order, the ablation row after its base model, then the
/// vote row over the main models.
pub fn build_table(models: &[ModelOutcome], ablation: Option<&ModelOutcome>) -> Result<ComparisonTable> {
    let confusion = |m: &ModelOutcome| {
        let pred: Vec<Label> = m.predictions.iter().map(|p| p.predicted).collect();
        let truth: Vec<Label> = m.predictions.iter().map(|p| p.truth).collect();
        ConfusionMatrix::from_labels(&pred, &truth)
    };
    let mut rows = Vec::new();
    for (i, m) in models.iter().enumerate() {
        rows.push(ComparisonRow {
            name: m.name.clone(),
            kind: RowKind::Model,
            confusion: confusion(m),
        });
        if let (0, Some(a)) = (i, ablation) {
            rows.push(ComparisonRow {
                name: a.name.clone(),
                kind: RowKind::Ablation,
                confusion: confusion(a),
            });
        }
    }
    let refs: Vec<&ModelOutcome> = models.iter().collect();
    let votes = vote_predictions(&refs)?;
    let pred: Vec<Label> = votes.iter().map(|v| v.2).collect();
    let truth: Vec<Label> = votes.iter().map(|v| v.1).collect();
    rows.push(ComparisonRow {
        name: "Majority Vote".into(),
        kind: RowKind::MajorityVote,
        confusion: ConfusionMatrix::from_labels(&pred, &truth),
    });
    Ok(ComparisonTable { rows })
}

/// Neighbour-based analysis of the first model's embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAnalysis {
    pub model: String,
    pub k: usize,
    pub entries: Vec<EmbeddingEntry>,
    pub neighbor_vote_accuracy: f64,
    pub classifier_accuracy: f64,
    pub distance_stats: DistanceStats,
    /// Absent when the entry count cannot support the perplexity.
    pub projection: Option<Vec<ProjectedPoint>>,
    pub tsne_kl: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub split_hash: String,
    pub train_count: usize,
    pub test_count: usize,
    pub models: Vec<ModelOutcome>,
    pub ablation: Option<ModelOutcome>,
    pub table: ComparisonTable,
    pub retrieval: Option<RetrievalAnalysis>,
}

fn unique_names(models: &[ModelConfig]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for m in models {
        let base = m.backbone_kind.as_str().to_string();
        let n = names.iter().filter(|x| x.split('#').next() == Some(base.as_str())).count();
        names.push(if n == 0 { base } else { format!("{base}#{}", n + 1) });
    }
    names
}

pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

struct Prepared {
    pipeline: Pipeline,
    train: Vec<CanonicalScan>,
    test: Vec<CanonicalScan>,
}

fn prepare(
    spec: &ExperimentSpec,
    enabled: bool,
    mask: Arc<dyn MaskModel>,
    manifest: &crate::dataset::DatasetManifest,
    split: &SplitAssignment,
) -> Result<Prepared> {
    let pipeline = Pipeline::new(spec.pipeline_config(enabled), mask)?;
    let dir = spec.manifest.parent().unwrap_or(Path::new("."));
    let train = canonicalize_records(&pipeline, dir, manifest.subset(&split.train_ids))?;
    let test = canonicalize_records(&pipeline, dir, manifest.subset(&split.test_ids))?;
    Ok(Prepared { pipeline, train, test })
}

fn train_and_evaluate(
    spec: &ExperimentSpec,
    name: &str,
    config: &ModelConfig,
    prep: &Prepared,
    hash: &str,
) -> Result<(TrainedModel, ModelOutcome)> {
    let wrap = |e: Error| Error::Training {
        model: name.to_string(),
        source: Box::new(e),
    };
    let ckpt = spec.output_dir.join("checkpoints").join(file_stem(name));
    let model = build_model(config.clone()).map_err(wrap)?;
    let source = ScanSource {
        pipeline: &prep.pipeline,
        scans: &prep.train,
    };
    let model = train(model, &source, &spec.training, Some(&ckpt)).map_err(wrap)?;
    model.save(&ckpt.join("final.cxrw")).map_err(wrap)?;
    let used: BTreeSet<String> = prep.train.iter().map(|s| s.scan_id.clone()).collect();
    let tested: BTreeSet<String> = prep.test.iter().map(|s| s.scan_id.clone()).collect();
    let seen = split_hash(&used, &tested);
    if seen != hash {
        return Err(wrap(Error::InvalidArgument(format!("split hash {seen} differs from {hash}"))));
    }
    let mut predictions = Vec::with_capacity(prep.test.len());
    for s in &prep.test {
        let inf = model.infer(&prep.pipeline.inference_input(&s.image)?)?;
        predictions.push(ScanPrediction {
            scan_id: s.scan_id.clone(),
            truth: s.label,
            score: inf.score.score,
            predicted: classify(&inf.score, spec.threshold),
        });
    }
    let scores: Vec<(f64, Label)> = predictions.iter().map(|p| (p.score, p.truth)).collect();
    let outcome = ModelOutcome {
        name: name.to_string(),
        config: config.clone(),
        preprocessing_enabled: prep.pipeline.config.preprocessing_enabled,
        split_hash: seen,
        report: evaluate(&scores, spec.threshold)?,
        predictions,
    };
    tracing::info!(model = name, accuracy = outcome.report.accuracy, "model evaluated");
    Ok((model, outcome))
}

/// Embeds every train and test scan with `model`.
pub fn embed_scans(
    model: &TrainedModel,
    pipeline: &Pipeline,
    train: &[CanonicalScan],
    test: &[CanonicalScan],
) -> Result<Vec<EmbeddingEntry>> {
    let mut out = Vec::with_capacity(train.len() + test.len());
    for (split, scans) in [(Split::Train, train), (Split::Test, test)] {
        for s in scans {
            let inf = model.infer(&pipeline.inference_input(&s.image)?)?;
            out.push(EmbeddingEntry {
                scan_id: s.scan_id.clone(),
                label: s.label,
                vector: inf.embedding,
                split,
                score: Some(inf.score.score),
            });
        }
    }
    Ok(out)
}

/// Neighbour vote, distance statistics and t-SNE over `entries`.
pub fn analyze_retrieval(
    model_name: &str,
    entries: Vec<EmbeddingEntry>,
    classifier_accuracy: f64,
    cfg: &RetrievalConfig,
) -> Result<RetrievalAnalysis> {
    let index = build_index(&entries)?;
    let test: Vec<EmbeddingEntry> = entries.iter().filter(|e| e.split == Split::Test).cloned().collect();
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for t in &test {
        let (label, _) = neighbor_vote(&query_knn(&index, &t.vector, cfg.k)?)?;
        correct += usize::from(label == t.label);
    }
    let distance_stats = class_distance_stats(&index, &test)?;
    let (projection, tsne_kl) = match project_entries(&entries, &cfg.tsne) {
        Ok((points, res)) => (Some(points), Some((res.kl_initial, res.kl_final))),
        Err(e @ Error::PerplexityInfeasible { .. }) => {
            tracing::warn!(error = %e, "skipping projection");
            (None, None)
        }
        Err(e) => return Err(e),
    };
    Ok(RetrievalAnalysis {
        model: model_name.to_string(),
        k: cfg.k,
        neighbor_vote_accuracy: correct as f64 / test.len() as f64,
        classifier_accuracy,
        distance_stats,
        projection,
        tsne_kl,
        entries,
    })
}

/// Trains every configured model on one shared split and tabulates the
/// results. Training failures abort, naming the model.
pub fn run_comparison(spec: &ExperimentSpec) -> Result<ComparisonResult> {
    spec.validate()?;
    let (manifest, log) = apply_exclusions(&load_manifest(&spec.manifest)?);
    if !log.is_empty() {
        tracing::info!(excluded = log.len(), "exclusions applied");
    }
    let split = patient_level_split(&manifest, spec.test_fraction, spec.split_seed)?;
    let hash = split_hash(&split.train_ids, &split.test_ids);
    let mask = spec.mask.build()?;
    let main = prepare(spec, spec.preprocessing_enabled, mask.clone(), &manifest, &split)?;

    let names = unique_names(&spec.models);
    let mut models = Vec::new();
    let mut first_model = None;
    for (name, cfg) in names.iter().zip(&spec.models) {
        let (model, outcome) = train_and_evaluate(spec, name, cfg, &main, &hash)?;
        if first_model.is_none() {
            first_model = Some(model);
        }
        models.push(outcome);
    }
    let ablation = if spec.ablation {
        let bare = prepare(spec, false, mask, &manifest, &split)?;
        let name = format!("{} - No preprocessing", names[0]);
        Some(train_and_evaluate(spec, &name, &spec.models[0], &bare, &hash)?.1)
    } else {
        None
    };
    let table = build_table(&models, ablation.as_ref())?;
    let first = first_model.expect("at least one model");
    let entries = embed_scans(&first, &main.pipeline, &main.train, &main.test)?;
    let retrieval = analyze_retrieval(
        &models[0].name,
        entries,
        models[0].report.accuracy.unwrap_or(0.0),
        &spec.retrieval,
    )?;
    Ok(ComparisonResult {
        split_hash: hash,
        train_count: split.train_ids.len(),
        test_count: split.test_ids.len(),
        models,
        ablation,
        table,
        retrieval: Some(retrieval),
    })
}

/// Distance summary reported alongside the table for reference.
pub const REFERENCE_DISTANCES: [(&str, f64, f64); 4] = [
    ("overall", 3.9, 2.5),
    ("pos_pos", 1.4, 1.9),
    ("neg_neg", 2.2, 1.3),
    ("cross", 5.8, 1.9),
];

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    write_atomic(&p, contents.as_bytes())?;
    Ok(p)
}

/// Writes the report bundle under `dir` and returns the files written.
pub fn emit_report(result: &ComparisonResult, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.models.is_empty() {
        return Err(Error::EmptyReport);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![write(dir, "comparison.tsv", &result.table.to_tsv())?];
    let mut summary = String::new();
    writeln!(summary, "split {} ({} train, {} test)", result.split_hash, result.train_count, result.test_count).unwrap();
    writeln!(summary).unwrap();
    summary.push_str(&result.table.to_tsv());
    for m in result.models.iter().chain(&result.ablation) {
        let stem = file_stem(&m.name);
        files.push(write(dir, &format!("evaluation_{stem}.json"), &serde_json::to_string_pretty(&m.report)?)?);
        if let Some(c) = &m.report.roc {
            files.push(write(dir, &format!("roc_{stem}.tsv"), &c.to_tsv())?);
        }
        if let Some(c) = &m.report.pr {
            files.push(write(dir, &format!("pr_{stem}.tsv"), &c.to_tsv())?);
        }
        files.push(write(dir, &format!("histogram_{stem}.tsv"), &m.report.histogram.to_tsv())?);
        let mut preds = String::from("scan_id\ttruth\tscore\tpredicted\n");
        for p in &m.predictions {
            writeln!(preds, "{}\t{}\t{}\t{}", p.scan_id, p.truth, fmt_sig9(p.score), p.predicted).unwrap();
        }
        files.push(write(dir, &format!("predictions_{stem}.tsv"), &preds)?);
        let auc = |c: &Option<crate::metrics::Curve>| c.as_ref().map_or("undefined".into(), |c| format!("{:.3}", c.auc));
        writeln!(summary, "{}: ROC AUC {}, P-R AUC {}", m.name, auc(&m.report.roc), auc(&m.report.pr)).unwrap();
    }
    if let Some(r) = &result.retrieval {
        files.push(write(dir, "embeddings.tsv", &crate::retrieval::entries_to_text(&r.entries)?)?);
        files.push(write(dir, "distance_stats.json", &serde_json::to_string_pretty(&r.distance_stats)?)?);
        let mut d = String::from("cell\tmean\tstd\tcount\n");
        let cells = [
            ("overall", &r.distance_stats.overall),
            ("pos_pos", &r.distance_stats.pos_pos),
            ("neg_neg", &r.distance_stats.neg_neg),
            ("cross", &r.distance_stats.cross),
        ];
        for (name, c) in cells {
            match c {
                Some(c) => writeln!(d, "{name}\t{}\t{}\t{}", fmt_sig9(c.mean), fmt_sig9(c.std), c.count).unwrap(),
                None => writeln!(d, "{name}\tundefined\tundefined\t0").unwrap(),
            }
        }
        files.push(write(dir, "distance_stats.tsv", &d)?);
        if let Some(points) = &r.projection {
            let mut t = String::from("scan_id\tlabel\tx\ty\n");
            for p in points {
                writeln!(t, "{}\t{}\t{}\t{}", p.scan_id, p.label, fmt_sig9(p.xy[0]), fmt_sig9(p.xy[1])).unwrap();
            }
            files.push(write(dir, "tsne.tsv", &t)?);
            files.push(write(dir, "projection.json", &serde_json::to_string_pretty(points)?)?);
        }
        writeln!(
            summary,
            "\nneighbour vote ({}, k={}): accuracy {:.3} vs classifier {:.3}",
            r.model, r.k, r.neighbor_vote_accuracy, r.classifier_accuracy
        )
        .unwrap();
        if let Some(o) = &r.distance_stats.overall {
            writeln!(summary, "train-test distance {:.3} +/- {:.3}", o.mean, o.std).unwrap();
        }
        let refs: Vec<String> = REFERENCE_DISTANCES
            .iter()
            .map(|(n, m, s)| format!("{n} {m} +/- {s}"))
            .collect();
        writeln!(summary, "reference distances (clinical data): {}", refs.join(", ")).unwrap();
        if let Some((a, b)) = r.tsne_kl {
            writeln!(summary, "t-SNE KL {a:.4} -> {b:.4}").unwrap();
        }
    }
    files.push(write(dir, "summary.txt", &summary)?);
    files.push(write(dir, "comparison.json", &serde_json::to_string_pretty(result)?)?);
    Ok(files)
}
