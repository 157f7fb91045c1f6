//! Classification statistics, ROC and precision-recall curves, score
//! histograms and resampled confidence intervals.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{patient_level_split, DatasetManifest, Label, SplitAssignment};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// A ratio that may be 0/0; serialized as a number or `"undefined"`.
pub mod ratio {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => x.serialize(s),
            None => s.serialize_str("undefined"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Str(s) if s == "undefined" => Ok(None),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad ratio `{s}`"))),
        }
    }
}

fn div(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn from_labels(pred: &[Label], truth: &[Label]) -> Self {
        let mut m = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p.is_positive(), t.is_positive()) {
                (true, true) => m.tp += 1,
                (true, false) => m.fp += 1,
                (false, false) => m.tn += 1,
                (false, true) => m.fn_ += 1,
            }
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn accuracy(&self) -> Option<f64> {
        div(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> Option<f64> {
        div(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        div(self.tn, self.tn + self.fp)
    }

    pub fn precision(&self) -> Option<f64> {
        div(self.tp, self.tp + self.fp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Roc,
    PrecisionRecall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub kind: CurveKind,
    /// `(fpr, tpr)` for ROC, `(recall, precision)` for P-R.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Formats with 9 significant digits, trimming trailing zeros.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let e = v.abs().log10().floor() as i32;
    if (-5..9).contains(&e) {
        let s = format!("{:.*}", (8 - e).max(0) as usize, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

impl Curve {
    /// Tab-separated `x`, `y` table with a header line.
    pub fn to_tsv(&self) -> String {
        let (hx, hy) = match self.kind {
            CurveKind::Roc => ("fpr", "tpr"),
            CurveKind::PrecisionRecall => ("recall", "precision"),
        };
        let mut s = format!("{hx}\t{hy}\n");
        for &(x, y) in &self.points {
            s.push_str(&format!("{}\t{}\n", fmt_sig9(x), fmt_sig9(y)));
        }
        s
    }
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Cumulative `(tp, fp)` after each group of equal scores, highest first.
fn sweep(scores: &[(f64, Label)]) -> Vec<(u64, u64)> {
    let mut sorted: Vec<(f64, Label)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1.is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

fn class_counts(scores: &[(f64, Label)]) -> (u64, u64) {
    let p = scores.iter().filter(|s| s.1.is_positive()).count() as u64;
    (p, scores.len() as u64 - p)
}

/// ROC over all distinct thresholds, from (0,0) to (1,1).
pub fn roc_curve(scores: &[(f64, Label)]) -> Result<Curve> {
    let (p, n) = class_counts(scores);
    if p == 0 || n == 0 {
        return Err(Error::Undefined("ROC".into()));
    }
    let mut points = vec![(0.0, 0.0)];
    points.extend(
        sweep(scores)
            .into_iter()
            .map(|(tp, fp)| (fp as f64 / n as f64, tp as f64 / p as f64)),
    );
    let auc = trapezoid(&points);
    Ok(Curve {
        kind: CurveKind::Roc,
        points,
        auc,
    })
}

/// Precision against recall; the first point sits at recall 0 with the
/// precision of the highest-score group.
pub fn pr_curve(scores: &[(f64, Label)]) -> Result<Curve> {
    let (p, _) = class_counts(scores);
    if p == 0 {
        return Err(Error::Undefined("precision-recall curve".into()));
    }
    let pts: Vec<(f64, f64)> = sweep(scores)
        .into_iter()
        .map(|(tp, fp)| (tp as f64 / p as f64, tp as f64 / (tp + fp) as f64))
        .collect();
    let mut points = vec![(0.0, pts[0].1)];
    points.extend(pts);
    let auc = trapezoid(&points);
    Ok(Curve {
        kind: CurveKind::PrecisionRecall,
        points,
        auc,
    })
}

pub const HISTOGRAM_BINS: usize = 20;

/// Score counts in equal bins over `[0, 1]`, split by ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub edges: Vec<f64>,
    pub positive: Vec<u64>,
    pub negative: Vec<u64>,
}

impl ScoreHistogram {
    pub fn new(scores: &[(f64, Label)], bins: usize) -> Self {
        let mut positive = vec![0; bins];
        let mut negative = vec![0; bins];
        for &(s, l) in scores {
            let b = ((s * bins as f64).floor() as usize).min(bins - 1);
            if l.is_positive() {
                positive[b] += 1;
            } else {
                negative[b] += 1;
            }
        }
        Self {
            edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            positive,
            negative,
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin_start\tbin_end\tnegative\tpositive\n");
        for i in 0..self.positive.len() {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                fmt_sig9(self.edges[i]),
                fmt_sig9(self.edges[i + 1]),
                self.negative[i],
                self.positive[i]
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    #[serde(with = "ratio")]
    pub accuracy: Option<f64>,
    #[serde(with = "ratio")]
    pub sensitivity: Option<f64>,
    #[serde(with = "ratio")]
    pub specificity: Option<f64>,
    #[serde(with = "ratio")]
    pub precision: Option<f64>,
    /// Absent when only one class is present.
    pub roc: Option<Curve>,
    pub pr: Option<Curve>,
    pub histogram: ScoreHistogram,
}

impl EvaluationReport {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::Sensitivity => self.sensitivity,
            Metric::Specificity => self.specificity,
            Metric::Precision => self.precision,
            Metric::RocAuc => self.roc.as_ref().map(|c| c.auc),
            Metric::PrAuc => self.pr.as_ref().map(|c| c.auc),
        }
    }
}

/// Scores every scan against `threshold` (positive iff `score >= threshold`).
pub fn evaluate(scores: &[(f64, Label)], threshold: f64) -> Result<EvaluationReport> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&(s, _)) = scores.iter().find(|(s, _)| !(0.0..=1.0).contains(s)) {
        return Err(Error::InvalidArgument(format!("score {s} outside [0, 1]")));
    }
    let pred: Vec<Label> = scores.iter().map(|&(s, _)| Label::from_bool(s >= threshold)).collect();
    let truth: Vec<Label> = scores.iter().map(|&(_, t)| t).collect();
    let confusion = ConfusionMatrix::from_labels(&pred, &truth);
    Ok(EvaluationReport {
        threshold,
        confusion,
        accuracy: confusion.accuracy(),
        sensitivity: confusion.sensitivity(),
        specificity: confusion.specificity(),
        precision: confusion.precision(),
        roc: roc_curve(scores).ok(),
        pr: pr_curve(scores).ok(),
        histogram: ScoreHistogram::new(scores, HISTOGRAM_BINS),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Sensitivity,
    Specificity,
    Precision,
    RocAuc,
    PrAuc,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Accuracy,
        Metric::Sensitivity,
        Metric::Specificity,
        Metric::Precision,
        Metric::RocAuc,
        Metric::PrAuc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Precision => "precision",
            Metric::RocAuc => "roc_auc",
            Metric::PrAuc => "pr_auc",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric `{s}`")))
    }
}

/// Linear-interpolation percentile of sorted values, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of nothing");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub metric_name: Metric,
    pub point_estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
    pub n_train_resamples: usize,
    pub n_bootstraps_each: usize,
    pub values: Vec<f64>,
}

impl BootstrapCI {
    /// Percentile interval over `values` at `confidence` (e.g. 0.95).
    pub fn from_values(
        metric: Metric,
        point_estimate: f64,
        values: Vec<f64>,
        confidence: f64,
        protocol: BootstrapProtocol,
    ) -> Self {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let tail = (1.0 - confidence) / 2.0;
        Self {
            metric_name: metric,
            point_estimate,
            lower: percentile_sorted(&sorted, tail),
            upper: percentile_sorted(&sorted, 1.0 - tail),
            confidence,
            n_train_resamples: protocol.n_train_resamples,
            n_bootstraps_each: protocol.n_bootstraps_each,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapProtocol {
    pub n_train_resamples: usize,
    pub n_bootstraps_each: usize,
}

impl Default for BootstrapProtocol {
    fn default() -> Self {
        Self {
            n_train_resamples: 10,
            n_bootstraps_each: 20,
        }
    }
}

/// Trains on a split and scores its test set.
pub trait PipelineRunner: Sync {
    /// `(score, ground truth)` for each test scan of `split`.
    fn run(&self, manifest: &DatasetManifest, split: &SplitAssignment, resplit: usize) -> Result<Vec<(f64, Label)>>;
}

impl<F> PipelineRunner for F
where
    F: Fn(&DatasetManifest, &SplitAssignment, usize) -> Result<Vec<(f64, Label)>> + Sync,
{
    fn run(&self, manifest: &DatasetManifest, split: &SplitAssignment, resplit: usize) -> Result<Vec<(f64, Label)>> {
        self(manifest, split, resplit)
    }
}

pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub protocol: BootstrapProtocol,
    pub test_fraction: f64,
    pub seed: u64,
    pub confidence: f64,
    pub threshold: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            protocol: BootstrapProtocol::default(),
            test_fraction: 0.15,
            seed: 0,
            confidence: 0.95,
            threshold: 0.5,
        }
    }
}

/// Retrains on `n_train_resamples` patient-disjoint splits and resamples each
/// test set `n_bootstraps_each` times; intervals are percentiles of the
/// pooled values. Resamples on which a requested metric is undefined are
/// redrawn.
pub fn bootstrap_cis(
    runner: &dyn PipelineRunner,
    manifest: &DatasetManifest,
    metrics: &[Metric],
    opts: &BootstrapOptions,
) -> Result<Vec<BootstrapCI>> {
    let proto = opts.protocol;
    if proto.n_train_resamples == 0 || proto.n_bootstraps_each == 0 || metrics.is_empty() {
        return Err(Error::InvalidArgument("bootstrap needs at least one split, resample and metric".into()));
    }
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); metrics.len()];
    let mut points: Vec<Vec<f64>> = vec![Vec::new(); metrics.len()];
    for r in 0..proto.n_train_resamples {
        let split_seed = derive_seed(opts.seed, r as u64, "resplit");
        let split = patient_level_split(manifest, opts.test_fraction, split_seed)?;
        let scored = runner.run(manifest, &split, r)?;
        if scored.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let full = evaluate(&scored, opts.threshold)?;
        for (k, &m) in metrics.iter().enumerate() {
            if let Some(v) = full.metric(m) {
                points[k].push(v);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, r as u64, "bootstrap"));
        for b in 0..proto.n_bootstraps_each {
            let mut attempts = 0;
            let report = loop {
                if attempts == MAX_REDRAWS {
                    return Err(Error::DegenerateBootstrap(MAX_REDRAWS));
                }
                attempts += 1;
                let sample: Vec<(f64, Label)> = (0..scored.len())
                    .map(|_| scored[rng.random_range(0..scored.len())])
                    .collect();
                let rep = evaluate(&sample, opts.threshold)?;
                if metrics.iter().all(|&m| rep.metric(m).is_some()) {
                    break rep;
                }
                tracing::debug!(resplit = r, bootstrap = b, attempts, "degenerate resample redrawn");
            };
            for (k, &m) in metrics.iter().enumerate() {
                values[k].push(report.metric(m).expect("checked above"));
            }
        }
    }
    Ok(metrics
        .iter()
        .zip(values)
        .zip(points)
        .map(|((&m, vals), pts)| {
            let point = if pts.is_empty() {
                f64::NAN
            } else {
                pts.iter().sum::<f64>() / pts.len() as f64
            };
            BootstrapCI::from_values(m, point, vals, opts.confidence, proto)
        })
        .collect())
}

/// Mann-Whitney statistic: `(concordant + 0.5 * tied) / (n_pos * n_neg)`.
pub fn concordance_auc(scores: &[(f64, Label)]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1.is_positive()).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1.is_positive()).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut acc = 0.0;
    for &p in &pos {
        for &n in &neg {
            acc += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(acc / (pos.len() * neg.len()) as f64)
}
