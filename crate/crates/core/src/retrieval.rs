//! Embedding index, exact nearest-neighbour search, distance statistics and
//! t-SNE projection.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::imaging::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub scan_id: String,
    pub label: Label,
    pub vector: Vec<f64>,
    pub split: Split,
    /// Classifier score of the scan, when known.
    #[serde(default)]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
}

/// Exact Euclidean index over training embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub entries: Vec<EmbeddingEntry>,
    pub dim: usize,
    pub distance: DistanceKind,
}

fn check_dims(entries: &[EmbeddingEntry]) -> Result<usize> {
    let dim = entries.first().ok_or(Error::EmptyIndex)?.vector.len();
    if let Some(e) = entries.iter().find(|e| e.vector.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: e.vector.len(),
        });
    }
    Ok(dim)
}

/// Indexes the training entries of `entries`.
pub fn build_index(entries: &[EmbeddingEntry]) -> Result<EmbeddingIndex> {
    let dim = check_dims(entries)?;
    let train: Vec<EmbeddingEntry> = entries.iter().filter(|e| e.split == Split::Train).cloned().collect();
    if train.is_empty() {
        return Err(Error::EmptyIndex);
    }
    Ok(EmbeddingIndex {
        entries: train,
        dim,
        distance: DistanceKind::Euclidean,
    })
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub scan_id: String,
    pub label: Label,
    pub distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborResult {
    pub query_id: Option<String>,
    pub neighbors: Vec<Neighbor>,
}

pub const DEFAULT_K: usize = 4;

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, scan_id: &str) -> Option<&EmbeddingEntry> {
        self.entries.iter().find(|e| e.scan_id == scan_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_entries(path, &self.entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        build_index(&read_entries(path)?)
    }
}

/// The `k` nearest entries, ascending by distance then scan id.
pub fn query_knn(index: &EmbeddingIndex, query: &[f64], k: usize) -> Result<NeighborResult> {
    query_knn_excluding(index, query, k, None)
}

/// As [`query_knn`], skipping the entry whose id is `exclude`.
pub fn query_knn_excluding(
    index: &EmbeddingIndex,
    query: &[f64],
    k: usize,
    exclude: Option<&str>,
) -> Result<NeighborResult> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if query.len() != index.dim {
        return Err(Error::DimMismatch {
            expected: index.dim,
            actual: query.len(),
        });
    }
    let mut scored: Vec<(f64, &EmbeddingEntry)> = index
        .entries
        .iter()
        .filter(|e| Some(e.scan_id.as_str()) != exclude)
        .map(|e| (euclidean(&e.vector, query), e))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.scan_id.cmp(&b.1.scan_id)));
    Ok(NeighborResult {
        query_id: exclude.map(str::to_string),
        neighbors: scored
            .into_iter()
            .take(k)
            .map(|(d, e)| Neighbor {
                scan_id: e.scan_id.clone(),
                label: e.label,
                distance: d,
                score: e.score,
            })
            .collect(),
    })
}

/// Positive iff the mean neighbour label is at least 0.5; returns the
/// positive fraction.
pub fn neighbor_vote(result: &NeighborResult) -> Result<(Label, f64)> {
    if result.neighbors.is_empty() {
        return Err(Error::InvalidArgument("vote needs at least one neighbour".into()));
    }
    let pos = result.neighbors.iter().filter(|n| n.label.is_positive()).count();
    let frac = pos as f64 / result.neighbors.len() as f64;
    Ok((Label::from_bool(frac >= 0.5), frac))
}

/// Averages neighbour classifier scores instead of labels.
pub fn neighbor_score_vote(result: &NeighborResult) -> Result<(Label, f64)> {
    if result.neighbors.is_empty() {
        return Err(Error::InvalidArgument("vote needs at least one neighbour".into()));
    }
    let mut sum = 0.0;
    for n in &result.neighbors {
        sum += n
            .score
            .ok_or_else(|| Error::InvalidArgument(format!("neighbour {} has no score", n.scan_id)))?;
    }
    let mean = sum / result.neighbors.len() as f64;
    Ok((Label::from_bool(mean >= 0.5), mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

/// Train-test pairwise distances; `pos_pos` pairs a positive training entry
/// with a positive test entry, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub overall: Option<MeanStd>,
    pub pos_pos: Option<MeanStd>,
    pub neg_neg: Option<MeanStd>,
    pub cross: Option<MeanStd>,
}

pub fn class_distance_stats(index: &EmbeddingIndex, test: &[EmbeddingEntry]) -> Result<DistanceStats> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut all, mut pp, mut nn, mut cross) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in test {
        if t.vector.len() != index.dim {
            return Err(Error::DimMismatch {
                expected: index.dim,
                actual: t.vector.len(),
            });
        }
        for e in &index.entries {
            let d = euclidean(&e.vector, &t.vector);
            all.push(d);
            match (e.label.is_positive(), t.label.is_positive()) {
                (true, true) => pp.push(d),
                (false, false) => nn.push(d),
                _ => cross.push(d),
            }
        }
    }
    Ok(DistanceStats {
        overall: MeanStd::of(&all),
        pos_pos: MeanStd::of(&pp),
        neg_neg: MeanStd::of(&nn),
        cross: MeanStd::of(&cross),
    })
}

pub const INDEX_VERSION: u32 = 1;

/// Text format: four `key<TAB>value` header lines (version, dim, count,
/// distance), a column line, then one tab-separated row per entry with
/// vector components in shortest round-trip `{:e}` form.
pub fn entries_to_text(entries: &[EmbeddingEntry]) -> Result<String> {
    let dim = if entries.is_empty() { 0 } else { check_dims(entries)? };
    let mut s = String::new();
    writeln!(s, "version\t{INDEX_VERSION}").unwrap();
    writeln!(s, "dim\t{dim}").unwrap();
    writeln!(s, "count\t{}", entries.len()).unwrap();
    writeln!(s, "distance\teuclidean").unwrap();
    writeln!(s, "scan_id\tlabel\tsplit\tscore\tvector").unwrap();
    for e in entries {
        if e.scan_id.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!("scan id {:?} contains a tab or newline", e.scan_id)));
        }
        let score = e.score.map_or("-".to_string(), |v| format!("{v:e}"));
        let vec: Vec<String> = e.vector.iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "{}\t{}\t{}\t{}\t{}", e.scan_id, e.label, e.split.as_str(), score, vec.join("\t")).unwrap();
    }
    Ok(s)
}

pub fn entries_from_text(text: &str) -> Result<Vec<EmbeddingEntry>> {
    let bad = |m: String| Error::Config(format!("embedding file: {m}"));
    let mut lines = text.lines();
    let mut header = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad(format!("missing {key} line")))?;
        match line.split_once('\t') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(bad(format!("expected {key} line, got {line:?}"))),
        }
    };
    let version: u32 = header("version")?.parse().map_err(|_| bad("bad version".into()))?;
    if version != INDEX_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dim: usize = header("dim")?.parse().map_err(|_| bad("bad dim".into()))?;
    let count: usize = header("count")?.parse().map_err(|_| bad("bad count".into()))?;
    if header("distance")? != "euclidean" {
        return Err(bad("unsupported distance".into()));
    }
    lines.next().ok_or_else(|| bad("missing column line".into()))?;
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 + dim {
            return Err(bad(format!("row {} has {} fields, expected {}", i + 1, f.len(), 4 + dim)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: bad number {s:?}", i + 1)));
        out.push(EmbeddingEntry {
            scan_id: f[0].to_string(),
            label: Label::parse(f[1]).ok_or_else(|| bad(format!("row {}: bad label", i + 1)))?,
            split: match f[2] {
                "train" => Split::Train,
                "test" => Split::Test,
                s => return Err(bad(format!("row {}: bad split {s:?}", i + 1))),
            },
            score: if f[3] == "-" { None } else { Some(num(f[3])?) },
            vector: f[4..].iter().map(|s| num(s)).collect::<Result<_>>()?,
        });
    }
    if out.len() != count {
        return Err(bad(format!("header says {count} rows, found {}", out.len())));
    }
    Ok(out)
}

pub fn write_entries(path: &Path, entries: &[EmbeddingEntry]) -> Result<()> {
    write_atomic(path, entries_to_text(entries)?.as_bytes())
}

pub fn read_entries(path: &Path) -> Result<Vec<EmbeddingEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    entries_from_text(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub scan_id: String,
    pub label: Label,
    pub xy: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    /// Defaults to `n / 12`.
    pub learning_rate: Option<f64>,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            seed: 0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    pub kl_initial: f64,
    pub kl_final: f64,
}

/// Row-conditional affinities matching `perplexity`, found by bisection on
/// the Gaussian precision.
fn conditional_p(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        let mut probs = vec![0.0; n];
        for _ in 0..200 {
            let mut sum = 0.0;
            for j in 0..n {
                probs[j] = if j == i { 0.0 } else { (-row[j] * beta).exp() };
                sum += probs[j];
            }
            let sum = sum.max(1e-300);
            let mut h = 0.0;
            for j in 0..n {
                probs[j] /= sum;
                if probs[j] > 1e-300 {
                    h -= probs[j] * probs[j].ln();
                }
            }
            let diff = h - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&probs);
    }
    p
}

fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                num[i * n + j] = 1.0 / (1.0 + d);
                z += num[i * n + j];
            }
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && p[i * n + j] > 0.0 {
                let q = (num[i * n + j] / z).max(1e-12);
                kl += p[i * n + j] * (p[i * n + j] / q).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE to two dimensions.
pub fn tsne(vectors: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = vectors.len();
    if cfg.perplexity <= 0.0 || (n as f64) < 3.0 * cfg.perplexity {
        return Err(Error::PerplexityInfeasible {
            perplexity: cfg.perplexity,
            n,
        });
    }
    if cfg.iterations < 250 {
        return Err(Error::InvalidArgument("t-SNE needs at least 250 iterations".into()));
    }
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: v.len(),
        });
    }
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d2[i * n + j] = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
    }
    let cond = conditional_p(&d2, n, cfg.perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
        p[i * n + i] = 0.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).unwrap();
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let kl_initial = kl_divergence(&p, &y);
    let lr = cfg.learning_rate.unwrap_or(n as f64 / 12.0);
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iters;
        let exag = if early { cfg.early_exaggeration } else { 1.0 };
        let momentum = if early { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                    num[i * n + j] = 1.0 / (1.0 + d);
                    z += num[i * n + j];
                }
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exag * p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                g[0] += 4.0 * w * (y[i][0] - y[j][0]);
                g[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                gains[i][a] = if (g[a] > 0.0) != (update[i][a] > 0.0) {
                    gains[i][a] + 0.2
                } else {
                    (gains[i][a] * 0.8).max(0.01)
                };
                update[i][a] = momentum * update[i][a] - lr * gains[i][a] * g[a];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        let (mx, my) = (
            y.iter().map(|v| v[0]).sum::<f64>() / n as f64,
            y.iter().map(|v| v[1]).sum::<f64>() / n as f64,
        );
        for v in y.iter_mut() {
            v[0] -= mx;
            v[1] -= my;
        }
    }
    let kl_final = kl_divergence(&p, &y);
    Ok(TsneResult {
        coords: y,
        kl_initial,
        kl_final,
    })
}

/// Projects entries and pairs the coordinates with their ids and labels.
pub fn project_entries(entries: &[EmbeddingEntry], cfg: &TsneConfig) -> Result<(Vec<ProjectedPoint>, TsneResult)> {
    let vectors: Vec<Vec<f64>> = entries.iter().map(|e| e.vector.clone()).collect();
    let res = tsne(&vectors, cfg)?;
    let points = entries
        .iter()
        .zip(&res.coords)
        .map(|(e, &xy)| ProjectedPoint {
            scan_id: e.scan_id.clone(),
            label: e.label,
            xy,
        })
        .collect();
    Ok((points, res))
}

/// Projection file: a JSON array of points. Coordinates round-trip exactly.
pub fn write_projection(path: &Path, points: &[ProjectedPoint]) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(points)?)
}

pub fn read_projection(path: &Path) -> Result<Vec<ProjectedPoint>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
