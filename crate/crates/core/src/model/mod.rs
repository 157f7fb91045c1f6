//! Classifier: convolutional backbone, three-layer decision head, training,
//! scoring, embeddings and ensemble voting.

mod backbones;

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use backbones::{Backbone, TINY_CHANNELS};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::nn::{self, ops, Ctx, DType, EntryKind, Linear, ParamStore, Tensor, Var, WeightFile};
use crate::seed::derive_seed;
use crate::segmentation::ModelInput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Resnet34,
    Resnet50,
    Resnet152,
    Vgg16,
    ChexpertDensenet,
    TinyTestCnn,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 6] = [
        BackboneKind::Resnet34,
        BackboneKind::Resnet50,
        BackboneKind::Resnet152,
        BackboneKind::Vgg16,
        BackboneKind::ChexpertDensenet,
        BackboneKind::TinyTestCnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Resnet34 => "resnet34",
            BackboneKind::Resnet50 => "resnet50",
            BackboneKind::Resnet152 => "resnet152",
            BackboneKind::Vgg16 => "vgg16",
            BackboneKind::ChexpertDensenet => "chexpert_densenet",
            BackboneKind::TinyTestCnn => "tiny_test_cnn",
        }
    }

    /// Smallest spatial input the backbone accepts after pooling.
    fn min_input(self) -> usize {
        match self {
            BackboneKind::TinyTestCnn => 8,
            _ => 32,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown backbone `{s}`")))
    }
}

fn default_input_size() -> usize {
    crate::imaging::CANONICAL_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ModelConfigRepr")]
pub struct ModelConfig {
    pub backbone_kind: BackboneKind,
    pub head_layer_widths: [usize; 3],
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
    /// Side length of the model input planes.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Area-averaging factor applied to the input before the backbone.
    #[serde(default)]
    pub input_pool: Option<usize>,
    #[serde(default)]
    pub init_seed: u64,
}

/// Config-file form: the head widths default by backbone.
#[derive(Deserialize)]
struct ModelConfigRepr {
    backbone_kind: BackboneKind,
    #[serde(default)]
    head_layer_widths: Option<[usize; 3]>,
    #[serde(default)]
    pretrained_weights: Option<PathBuf>,
    #[serde(default = "default_input_size")]
    input_size: usize,
    #[serde(default)]
    input_pool: Option<usize>,
    #[serde(default)]
    init_seed: u64,
}

impl From<ModelConfigRepr> for ModelConfig {
    fn from(r: ModelConfigRepr) -> Self {
        let base = ModelConfig::new(r.backbone_kind);
        Self {
            head_layer_widths: r.head_layer_widths.unwrap_or(base.head_layer_widths),
            pretrained_weights: r.pretrained_weights,
            input_size: r.input_size,
            input_pool: r.input_pool,
            init_seed: r.init_seed,
            ..base
        }
    }
}

impl ModelConfig {
    pub fn new(kind: BackboneKind) -> Self {
        let head = match kind {
            BackboneKind::TinyTestCnn => [64, 16, 2],
            _ => [512, 128, 2],
        };
        Self {
            backbone_kind: kind,
            head_layer_widths: head,
            pretrained_weights: None,
            input_size: default_input_size(),
            input_pool: None,
            init_seed: 0,
        }
    }

    pub fn pool(&self) -> usize {
        self.input_pool.unwrap_or(match self.backbone_kind {
            BackboneKind::TinyTestCnn => 16,
            _ => 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.head_layer_widths;
        if a == 0 || b == 0 {
            return Err(Error::InvalidArgument("head widths must be positive".into()));
        }
        if c != 2 {
            return Err(Error::InvalidArgument("decision head must end in 2 outputs".into()));
        }
        let pool = self.pool();
        if pool == 0 || self.input_size % pool != 0 {
            return Err(Error::InvalidArgument(format!(
                "input pool {pool} does not divide input size {}",
                self.input_size
            )));
        }
        if self.input_size / pool < self.backbone_kind.min_input() {
            return Err(Error::InvalidArgument(format!(
                "{} needs at least {} pixels after pooling",
                self.backbone_kind,
                self.backbone_kind.min_input()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub initial_learning_rate: f64,
    pub lr_decay_per_epoch: f64,
    pub l2_coefficient: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub global_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            initial_learning_rate: 1e-6,
            lr_decay_per_epoch: 0.95,
            l2_coefficient: 1e-2,
            epochs: 32,
            batch_size: 16,
            global_seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Settings that train the tiny backbone on synthetic data in minutes.
    pub fn desk() -> Self {
        Self {
            initial_learning_rate: 3e-3,
            epochs: 14,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::InvalidArgument("lr decay must lie in (0, 1]".into()));
        }
        if !(self.l2_coefficient >= 0.0) {
            return Err(Error::InvalidArgument("l2 coefficient must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        nn::exponential_lr(self.initial_learning_rate, self.lr_decay_per_epoch, epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionScore {
    pub score: f64,
    pub raw_logits: [f64; 2],
}

impl PredictionScore {
    pub fn from_logits(raw_logits: [f64; 2]) -> Self {
        let p = ops::softmax_rows(&Tensor::new(vec![1, 2], raw_logits.to_vec()));
        Self {
            score: p.data()[1],
            raw_logits,
        }
    }

    pub fn negative_probability(&self) -> f64 {
        ops::softmax_rows(&Tensor::new(vec![1, 2], self.raw_logits.to_vec())).data()[0]
    }
}

/// Score and embedding of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub score: PredictionScore,
    pub embedding: Vec<f64>,
}

/// A classifier with its weights and training history.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub training_log: Vec<EpochLog>,
    pub embedding_dim: usize,
    store: ParamStore,
    backbone: Backbone,
    head: [Linear; 3],
}

/// Builds a classifier, loading backbone weights by name when configured.
pub fn build_model(config: ModelConfig) -> Result<TrainedModel> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let backbone = Backbone::new(config.backbone_kind, &mut store, &mut rng);
    let [w1, w2, w3] = config.head_layer_widths;
    let head = [
        Linear::new(&mut store, &mut rng, "head.fc1", backbone.feature_dim(), w1),
        Linear::new(&mut store, &mut rng, "head.fc2", w1, w2),
        Linear::new(&mut store, &mut rng, "head.fc3", w2, w3),
    ];
    if let Some(path) = &config.pretrained_weights {
        let wf = WeightFile::load(path)?;
        wf.load_into_where(&mut store, true, |name| !name.starts_with("head."))?;
    }
    Ok(TrainedModel {
        embedding_dim: w2,
        config,
        training_log: Vec::new(),
        store,
        backbone,
        head,
    })
}

impl TrainedModel {
    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn name(&self) -> &'static str {
        self.config.backbone_kind.as_str()
    }

    /// Returns `(logits [n, 2], embedding [n, e])`.
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> (Var, Var) {
        let f = self.backbone.forward(ctx, x);
        let h = ops::relu(&self.head[0].forward(ctx, &f));
        let e = ops::relu(&self.head[1].forward(ctx, &h));
        (self.head[2].forward(ctx, &e), e)
    }

    fn side(&self) -> usize {
        self.config.input_size / self.config.pool()
    }

    /// Packs model inputs into an `[n, 3, s, s]` batch.
    pub fn pack(&self, inputs: &[&ModelInput]) -> Result<Tensor> {
        let s = self.side();
        let mut data = Vec::with_capacity(inputs.len() * 3 * s * s);
        for inp in inputs {
            self.check_input(inp)?;
            data.extend(inp.to_chw(self.config.pool()));
        }
        Ok(Tensor::new(vec![inputs.len(), 3, s, s], data))
    }

    fn check_input(&self, inp: &ModelInput) -> Result<()> {
        if inp.size() != self.config.input_size {
            return Err(Error::ShapeMismatch {
                expected: format!("3x{0}x{0}", self.config.input_size),
                actual: format!("3x{0}x{0}", inp.size()),
            });
        }
        Ok(())
    }

    /// Inference-mode scores and embeddings for a packed batch.
    pub fn infer_tensor(&self, x: Tensor) -> Vec<Inference> {
        let ctx = Ctx::inference(&self.store);
        let (logits, emb) = self.forward(&ctx, &Var::constant(x));
        let e = self.embedding_dim;
        logits
            .value()
            .data()
            .chunks(2)
            .zip(emb.value().data().chunks(e))
            .map(|(l, v)| Inference {
                score: PredictionScore::from_logits([l[0], l[1]]),
                embedding: v.to_vec(),
            })
            .collect()
    }

    pub fn infer_batch(&self, inputs: &[&ModelInput]) -> Result<Vec<Inference>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.infer_tensor(self.pack(inputs)?))
    }

    pub fn infer(&self, input: &ModelInput) -> Result<Inference> {
        Ok(self.infer_batch(&[input])?.remove(0))
    }

    /// Cross-entropy plus `l2 * ||theta||^2` and its gradient per parameter
    /// slot. Batch norm runs in inference mode so the function is
    /// deterministic in the parameters.
    pub fn loss_and_grads(&self, x: &Tensor, targets: &[usize], l2: f64) -> (f64, Vec<Option<Tensor>>) {
        let ctx = Ctx::new(&self.store, false, true);
        let (logits, _) = self.forward(&ctx, &Var::constant(x.clone()));
        let ce = ops::softmax_cross_entropy(&logits, targets);
        let mut grads = nn::backward(&ce, self.store.len());
        for (id, e) in self.store.entries().iter().enumerate() {
            if e.kind != EntryKind::Param {
                continue;
            }
            let reg = e.tensor.map(|v| 2.0 * l2 * v);
            match &mut grads[id] {
                Some(g) => g.add_assign(&reg),
                slot => *slot = Some(reg),
            }
        }
        (ce.value().item() + l2 * self.store.l2_norm_sq(), grads)
    }

    /// The loss alone, for finite-difference checks.
    pub fn loss(&self, x: &Tensor, targets: &[usize], l2: f64) -> f64 {
        let ctx = Ctx::inference(&self.store);
        let (logits, _) = self.forward(&ctx, &Var::constant(x.clone()));
        ops::softmax_cross_entropy(&logits, targets).value().item() + l2 * self.store.l2_norm_sq()
    }

    fn architecture(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "classifier", "model_config": self.config })
    }

    /// Writes a checkpoint: weights, model config and `metadata`.
    pub fn save_checkpoint(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let mut meta = metadata;
        if let serde_json::Value::Object(m) = &mut meta {
            m.insert("training_log".into(), serde_json::to_value(&self.training_log)?);
        }
        WeightFile::from_store(self.architecture(), meta, &self.store).save(path, DType::F64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_checkpoint(path, serde_json::json!({}))
    }

    /// Loads a checkpoint written by [`TrainedModel::save_checkpoint`].
    pub fn load(path: &Path) -> Result<Self> {
        let wf = WeightFile::load(path)?;
        if wf.architecture.get("kind").and_then(|k| k.as_str()) != Some("classifier") {
            return Err(Error::WeightMismatch(format!("{} is not a classifier checkpoint", path.display())));
        }
        let mut config: ModelConfig = serde_json::from_value(wf.architecture["model_config"].clone())
            .map_err(|e| Error::WeightMismatch(format!("model config: {e}")))?;
        config.pretrained_weights = None;
        let mut model = build_model(config)?;
        wf.load_into(&mut model.store, false)?;
        if let Some(log) = wf.metadata.get("training_log") {
            model.training_log = serde_json::from_value(log.clone())
                .map_err(|e| Error::CorruptWeights(format!("training log: {e}")))?;
        }
        Ok(model)
    }
}

/// Supplies labelled model inputs to [`train`]; `input(i, epoch)` carries the
/// per-epoch augmentation.
pub trait TrainingSource: Sync {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> Label;
    fn input(&self, i: usize, epoch: usize) -> Result<ModelInput>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs Adam on cross-entropy + L2 with an exponentially decaying learning
/// rate. With `checkpoint_dir`, writes `epoch_NNN.cxrw` after each epoch and
/// appends to `training_log.jsonl`.
pub fn train(
    mut model: TrainedModel,
    source: &dyn TrainingSource,
    cfg: &TrainingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let n = source.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<Label> = (0..n).map(|i| source.label(i)).collect();
    if labels.iter().all(|&l| l == labels[0]) {
        tracing::warn!(class = %labels[0], "training set has a single class");
    }
    let mut log_file = match checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("training_log.jsonl");
            Some(std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?)
        }
        None => None,
    };
    let mut opt = nn::Adam::new(model.store.len(), cfg.l2_coefficient);
    let pool = model.config.pool();
    let start_epoch = model.training_log.len();
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.global_seed, epoch as u64, "batch-order")));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<Vec<f64>> = batch
                .par_iter()
                .map(|&i| {
                    let inp = source.input(i, epoch)?;
                    model.check_input(&inp)?;
                    Ok(inp.to_chw(pool))
                })
                .collect::<Result<_>>()?;
            let s = model.side();
            let x = Tensor::new(vec![batch.len(), 3, s, s], inputs.concat());
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i].class_index()).collect();
            let (loss, grads, updates, preds) = {
                let ctx = Ctx::new(&model.store, true, true);
                let (logits, _) = model.forward(&ctx, &Var::constant(x));
                let loss = ops::softmax_cross_entropy(&logits, &targets);
                let preds: Vec<usize> = logits
                    .value()
                    .data()
                    .chunks(2)
                    .map(|l| usize::from(l[1] >= l[0]))
                    .collect();
                let grads = nn::backward(&loss, model.store.len());
                (loss.value().item(), grads, ctx.take_bn_updates(), preds)
            };
            if !loss.is_finite() {
                return Err(Error::Training {
                    model: model.name().into(),
                    source: Box::new(Error::InvalidArgument(format!("non-finite loss at epoch {epoch}"))),
                });
            }
            nn::params::apply_bn_updates(&mut model.store, updates);
            opt.step(&mut model.store, &grads, lr);
            loss_sum += loss * batch.len() as f64;
            correct += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
        }
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
        };
        tracing::info!(model = model.name(), epoch, lr, loss = entry.loss, train_acc = entry.train_acc, "epoch done");
        model.training_log.push(entry.clone());
        if let (Some(dir), Some(f)) = (checkpoint_dir, log_file.as_mut()) {
            let line = serde_json::to_string(&entry)?;
            writeln!(f, "{line}").map_err(|e| Error::io(dir.join("training_log.jsonl"), e))?;
            model.save_checkpoint(
                &dir.join(format!("epoch_{epoch:03}.cxrw")),
                serde_json::json!({
                    "training_config": cfg,
                    "epoch": epoch,
                    "metrics": { "loss": entry.loss, "train_acc": entry.train_acc },
                }),
            )?;
        }
    }
    Ok(model)
}

pub fn predict(model: &TrainedModel, input: &ModelInput) -> Result<PredictionScore> {
    Ok(model.infer(input)?.score)
}

pub fn extract_embedding(model: &TrainedModel, input: &ModelInput) -> Result<Vec<f64>> {
    Ok(model.infer(input)?.embedding)
}

/// Positive iff `score >= threshold`.
pub fn classify(score: &PredictionScore, threshold: f64) -> Label {
    Label::from_bool(score.score >= threshold)
}

/// Most frequent label; an even split goes to positive.
pub fn majority_vote(labels: &[Label]) -> Result<Label> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("majority vote needs at least one label".into()));
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    Ok(Label::from_bool(2 * pos >= labels.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{CanonicalImage, PadBox, Plane};
    use crate::segmentation::{compose_input, LungMask};
    use proptest::prelude::*;

    fn tiny(size: usize) -> ModelConfig {
        ModelConfig {
            input_size: size,
            input_pool: Some(1),
            ..ModelConfig::new(BackboneKind::TinyTestCnn)
        }
    }

    fn input(size: usize, f: impl Fn(usize, usize) -> f32) -> ModelInput {
        let plane = Plane::new(size, size, (0..size * size).map(|i| f(i % size, i / size)).collect());
        let img = CanonicalImage::from_parts(plane, PadBox::full(size)).unwrap();
        compose_input(&img, &LungMask::zeros(size)).unwrap()
    }

    #[test]
    fn tiny_embedding_dim_follows_head() {
        let m = build_model(ModelConfig::new(BackboneKind::TinyTestCnn)).unwrap();
        assert_eq!(m.embedding_dim, 16);
        assert_eq!(m.config.pool(), 16);
    }

    #[test]
    fn head_must_end_in_two() {
        let mut c = tiny(16);
        c.head_layer_widths = [8, 4, 3];
        assert!(build_model(c).is_err());
    }

    #[test]
    fn zero_input_gives_finite_logits_and_builds_are_reproducible() {
        let a = build_model(tiny(16)).unwrap();
        let b = build_model(tiny(16)).unwrap();
        let z = input(16, |_, _| 0.0);
        let (pa, pb) = (a.infer(&z).unwrap(), b.infer(&z).unwrap());
        assert!(pa.score.raw_logits.iter().all(|v| v.is_finite()));
        assert_eq!(pa, pb);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let m = build_model(tiny(16)).unwrap();
        assert!(matches!(m.infer(&input(32, |_, _| 0.0)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn score_examples() {
        assert_eq!(PredictionScore::from_logits([0.0, 0.0]).score, 0.5);
        assert!(PredictionScore::from_logits([-800.0, 800.0]).score > 1.0 - 1e-12);
        assert_eq!(classify(&PredictionScore::from_logits([0.0, 0.0]), 0.5), Label::Positive);
        let s = PredictionScore { score: 0.9, raw_logits: [0.0, 0.0] };
        assert_eq!(classify(&s, 0.5), Label::Positive);
    }

    #[test]
    fn votes() {
        use Label::*;
        assert_eq!(majority_vote(&[Positive, Positive, Negative, Negative, Positive]).unwrap(), Positive);
        assert_eq!(majority_vote(&[Negative; 5]).unwrap(), Negative);
        assert_eq!(majority_vote(&[Negative, Positive]).unwrap(), Positive);
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(tiny(16)).unwrap();
        let p = dir.path().join("m.cxrw");
        m.save(&p).unwrap();
        let back = TrainedModel::load(&p).unwrap();
        let x = input(16, |x, y| ((x * y) % 5) as f32 / 5.0);
        assert_eq!(m.infer(&x).unwrap(), back.infer(&x).unwrap());
    }

    #[test]
    fn pretrained_backbone_loads_by_name_and_head_stays_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let mut donor = build_model(ModelConfig { init_seed: 9, ..tiny(16) }).unwrap();
        donor.params_mut().get_mut(0).data_mut()[0] = 0.123;
        let p = dir.path().join("donor.cxrw");
        donor.save(&p).unwrap();
        let m = build_model(ModelConfig { pretrained_weights: Some(p), ..tiny(16) }).unwrap();
        assert_eq!(m.params().get(0).data()[0], 0.123);
        let fc1 = m.params().id("head.fc1.weight").unwrap();
        assert_ne!(m.params().get(fc1), donor.params().get(fc1));
    }

    #[test]
    fn full_backbones_build_with_torchvision_names() {
        for (kind, name, dim) in [
            (BackboneKind::Resnet34, "layer4.2.bn2.running_var", 512),
            (BackboneKind::Resnet50, "layer2.0.downsample.0.weight", 2048),
            (BackboneKind::Vgg16, "features.28.bias", 512),
            (BackboneKind::ChexpertDensenet, "features.denseblock4.denselayer16.conv2.weight", 1024),
        ] {
            let cfg = ModelConfig { input_size: 32, head_layer_widths: [16, 8, 2], ..ModelConfig::new(kind) };
            let m = build_model(cfg).unwrap();
            assert!(m.params().id(name).is_some(), "{kind}: {name}");
            assert_eq!(m.backbone.feature_dim(), dim);
            let out = m.infer(&input(32, |x, _| x as f32 / 32.0)).unwrap();
            assert!(out.score.raw_logits.iter().all(|v| v.is_finite()));
            assert_eq!(out.embedding.len(), 8);
        }
    }

    #[test]
    fn resnet152_has_the_published_depth() {
        let cfg = ModelConfig { input_size: 32, ..ModelConfig::new(BackboneKind::Resnet152) };
        let m = build_model(cfg).unwrap();
        assert!(m.params().id("layer3.35.conv3.weight").is_some());
        assert!(m.params().id("layer3.36.conv3.weight").is_none());
        // Backbone parameters of the torchvision model, without its fc layer.
        let fc_free = m.params().param_count() - (2048 * 512 + 512 + 512 * 128 + 128 + 128 * 2 + 2);
        assert_eq!(fc_free, 60_192_808 - (2048 * 1000 + 1000));
    }

    /// Two-pixel-pattern data: positives bright on the left half.
    struct Toy(Vec<(ModelInput, Label)>);

    impl TrainingSource for Toy {
        fn len(&self) -> usize {
            self.0.len()
        }
        fn label(&self, i: usize) -> Label {
            self.0[i].1
        }
        fn input(&self, i: usize, _epoch: usize) -> Result<ModelInput> {
            Ok(self.0[i].0.clone())
        }
    }

    fn toy(n: usize) -> Toy {
        Toy((0..n)
            .map(|i| {
                let pos = i % 2 == 1;
                let shade = 0.3 + 0.05 * (i / 2) as f32;
                (input(16, |x, _| if (x < 8) == pos { shade + 0.4 } else { shade }), Label::from_bool(pos))
            })
            .collect())
    }

    fn desk_cfg(epochs: usize) -> TrainingConfig {
        TrainingConfig {
            initial_learning_rate: 3e-3,
            lr_decay_per_epoch: 0.98,
            l2_coefficient: 1e-4,
            epochs,
            batch_size: 4,
            global_seed: 1,
        }
    }

    #[test]
    fn overfits_eight_images_and_logs_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy(8);
        let m = train(build_model(tiny(16)).unwrap(), &data, &desk_cfg(100), Some(dir.path())).unwrap();
        assert!(m.training_log[5].loss < m.training_log[0].loss);
        let correct = data
            .0
            .iter()
            .filter(|(x, l)| classify(&predict(&m, x).unwrap(), 0.5) == *l)
            .count();
        assert_eq!(correct, 8);
        let log = std::fs::read_to_string(dir.path().join("training_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 100);
        let ck = TrainedModel::load(&dir.path().join("epoch_099.cxrw")).unwrap();
        assert_eq!(ck.training_log.len(), 100);
        assert_eq!(ck.infer(&data.0[0].0).unwrap(), m.infer(&data.0[0].0).unwrap());

        // Separated classes end up farther apart than members of one class.
        let e: Vec<Vec<f64>> = data.0.iter().map(|(x, _)| extract_embedding(&m, x).unwrap()).collect();
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(d(&e[0], &e[1]) > d(&e[0], &e[2]));
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy(6);
        let a = train(build_model(tiny(16)).unwrap(), &data, &desk_cfg(3), None).unwrap();
        let b = train(build_model(tiny(16)).unwrap(), &data, &desk_cfg(3), None).unwrap();
        assert_eq!(a.training_log, b.training_log);
    }

    #[test]
    fn empty_training_set_errors() {
        let r = train(build_model(tiny(16)).unwrap(), &Toy(vec![]), &desk_cfg(1), None);
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn probabilities_sum_to_one(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let s = PredictionScore::from_logits([a, b]);
            prop_assert!((s.score + s.negative_probability() - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&s.score));
        }

        #[test]
        fn raising_threshold_never_adds_positives(scores in proptest::collection::vec(0.0f64..1.0, 1..50), t1 in 0.0f64..1.0, dt in 0.0f64..1.0) {
            let t2 = (t1 + dt).min(1.0);
            for s in scores {
                let p = PredictionScore { score: s, raw_logits: [0.0, 0.0] };
                if classify(&p, t2).is_positive() {
                    prop_assert!(classify(&p, t1).is_positive());
                }
            }
        }

        #[test]
        fn odd_votes_match_mode(bits in proptest::collection::vec(any::<bool>(), 1..12)) {
            let labels: Vec<Label> = bits.iter().map(|&b| Label::from_bool(b)).collect();
            let pos = bits.iter().filter(|&&b| b).count();
            let neg = bits.len() - pos;
            let v = majority_vote(&labels).unwrap();
            if pos != neg {
                prop_assert_eq!(v.is_positive(), pos > neg);
            } else {
                prop_assert!(v.is_positive());
            }
        }
    }
}
