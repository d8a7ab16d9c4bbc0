//! Embedding stores, the shared embedding file format, a seeded random-projection
//! chart embedder, a principal-component news reducer, and multimodal fusion.
//!
//! File format: a header line `dim=<N> kind=<chart|news_raw|news_reduced|multimodal>`
//! followed by `timestamp_ms,v1,...,vN` rows.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::FeatureMatrix;

pub const CHART_DIM: usize = 128;
pub const NEWS_RAW_DIM: usize = 768;
pub const DEFAULT_WINDOW: usize = 6;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("duplicate embedding timestamp {0}")]
    Duplicate(i64),
    #[error("non-finite value in embedding {0}")]
    NonFinite(i64),
    #[error("row {index} needs {needed} earlier rows for its window")]
    Warmup { index: usize, needed: usize },
    #[error("need at least {needed} vectors, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("window length must be at least 2, got {0}")]
    Window(usize),
    #[error("store kind {got:?} where {expected:?} is required")]
    Kind {
        expected: EmbeddingKind,
        got: EmbeddingKind,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Chart,
    NewsRaw,
    NewsReduced,
    Multimodal,
}

impl EmbeddingKind {
    pub fn expected_dim(self) -> usize {
        match self {
            Self::NewsRaw => NEWS_RAW_DIM,
            _ => CHART_DIM,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Chart => "chart",
            Self::NewsRaw => "news_raw",
            Self::NewsReduced => "news_reduced",
            Self::Multimodal => "multimodal",
        }
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chart" => Ok(Self::Chart),
            "news_raw" => Ok(Self::NewsRaw),
            "news_reduced" => Ok(Self::NewsReduced),
            "multimodal" => Ok(Self::Multimodal),
            other => Err(format!("unknown embedding kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    /// Open time of the window's final bar (or publication time for raw news).
    pub timestamp: i64,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(timestamp: i64, values: Vec<f64>) -> Self {
        Self { timestamp, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    kind: EmbeddingKind,
    dim: usize,
    entries: BTreeMap<i64, EmbeddingVector>,
}

impl EmbeddingStore {
    pub fn new(kind: EmbeddingKind) -> Self {
        Self {
            kind,
            dim: kind.expected_dim(),
            entries: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, timestamp: i64) -> Option<&EmbeddingVector> {
        self.entries.get(&timestamp)
    }

    pub fn iter(&self) -> impl Iterator<Item = &EmbeddingVector> {
        self.entries.values()
    }

    /// Vectors with `after < timestamp <= until`, oldest first.
    pub fn range(&self, after: i64, until: i64) -> impl Iterator<Item = &EmbeddingVector> {
        use std::ops::Bound::{Excluded, Included};
        self.entries
            .range((Excluded(after), Included(until)))
            .map(|(_, v)| v)
    }

    pub fn insert(&mut self, vector: EmbeddingVector) -> Result<(), EmbeddingError> {
        if vector.dim() != self.dim {
            return Err(EmbeddingError::Dim {
                expected: self.dim,
                got: vector.dim(),
            });
        }
        if vector.values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(vector.timestamp));
        }
        if self.entries.contains_key(&vector.timestamp) {
            return Err(EmbeddingError::Duplicate(vector.timestamp));
        }
        self.entries.insert(vector.timestamp, vector);
        Ok(())
    }

    pub fn write(&self, sink: impl Write) -> Result<(), EmbeddingError> {
        let mut w = std::io::BufWriter::new(sink);
        writeln!(w, "dim={} kind={}", self.dim, self.kind.as_str())?;
        for v in self.entries.values() {
            write!(w, "{}", v.timestamp)?;
            for x in &v.values {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a store in the shared embedding file format.
pub fn load_embeddings(source: impl Read) -> Result<EmbeddingStore, EmbeddingError> {
    let mut lines = BufReader::new(source).lines();
    let header = lines.next().ok_or(EmbeddingError::Format {
        line: 1,
        message: "missing header".into(),
    })??;
    let (dim, kind) = parse_header(&header)?;
    if dim != kind.expected_dim() {
        return Err(EmbeddingError::Format {
            line: 1,
            message: format!("{} stores have dim {}, header says {dim}", kind.as_str(), kind.expected_dim()),
        });
    }
    let mut store = EmbeddingStore::new(kind);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fmt = |message: String| EmbeddingError::Format { line: line_no, message };
        let mut fields = line.split(',');
        let timestamp = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse::<i64>()
            .map_err(|e| fmt(format!("bad timestamp: {e}")))?;
        let values = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fmt(format!("bad value: {e}")))?;
        if values.len() != dim {
            return Err(fmt(format!("row has {} values, header dim is {dim}", values.len())));
        }
        store
            .insert(EmbeddingVector::new(timestamp, values))
            .map_err(|e| fmt(e.to_string()))?;
    }
    Ok(store)
}

fn parse_header(header: &str) -> Result<(usize, EmbeddingKind), EmbeddingError> {
    let fmt = |message: String| EmbeddingError::Format { line: 1, message };
    let mut dim = None;
    let mut kind = None;
    for token in header.split_whitespace() {
        match token.split_once('=') {
            Some(("dim", v)) => dim = Some(v.parse::<usize>().map_err(|e| fmt(e.to_string()))?),
            Some(("kind", v)) => kind = Some(v.parse::<EmbeddingKind>().map_err(fmt)?),
            _ => return Err(fmt(format!("unexpected header token `{token}`"))),
        }
    }
    match (dim, kind) {
        (Some(d), Some(k)) => Ok((d, k)),
        _ => Err(fmt("header needs dim= and kind=".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    len: usize,
}

impl WindowSpec {
    pub fn new(len: usize) -> Result<Self, EmbeddingError> {
        if len < 2 {
            return Err(EmbeddingError::Window(len));
        }
        Ok(Self { len })
    }

    pub fn len(&self) -> usize {
        self.len
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { len: DEFAULT_WINDOW }
    }
}

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, width: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut rows_seen: Vec<&[f64]> = Vec::new();
        for r in rows {
            for (s, v) in sum.iter_mut().zip(r) {
                *s += v;
            }
            rows_seen.push(r);
            n += 1;
        }
        let denom = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / denom).collect();
        let mut var = vec![0.0; width];
        for r in rows_seen {
            for ((acc, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|v| (v / denom).sqrt()).collect();
        Self { mean, std }
    }

    pub fn standardize(&self, column: usize, value: f64) -> f64 {
        let sd = self.std[column];
        let centered = value - self.mean[column];
        if sd > 0.0 && sd.is_finite() {
            centered / sd
        } else {
            centered
        }
    }
}

/// Deterministic chart-window embedder: standardized window rows, flattened,
/// projected by a seeded Gaussian matrix and L2-normalized.
#[derive(Debug, Clone)]
pub struct BaselineChartEmbedder {
    window: WindowSpec,
    stats: ColumnStats,
    width: usize,
    out_dim: usize,
    projection: Vec<f64>,
}

impl BaselineChartEmbedder {
    /// `stats` must come from candidate-pool rows only.
    pub fn new(window: WindowSpec, stats: ColumnStats, seed: u64) -> Self {
        Self::with_dim(window, stats, seed, CHART_DIM)
    }

    pub fn with_dim(window: WindowSpec, stats: ColumnStats, seed: u64, out_dim: usize) -> Self {
        let width = stats.mean.len();
        let in_dim = window.len() * width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..out_dim * in_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            window,
            stats,
            width,
            out_dim,
            projection,
        }
    }

    pub fn window(&self) -> WindowSpec {
        self.window
    }

    pub fn stats(&self) -> &ColumnStats {
        &self.stats
    }

    /// Embeds the window of matrix rows ending at row `row`.
    pub fn embed(&self, matrix: &FeatureMatrix, row: usize) -> Result<EmbeddingVector, EmbeddingError> {
        let l = self.window.len();
        if row + 1 < l || row >= matrix.len() {
            return Err(EmbeddingError::Warmup {
                index: row,
                needed: l - 1,
            });
        }
        if matrix.width() != self.width {
            return Err(EmbeddingError::Dim {
                expected: self.width,
                got: matrix.width(),
            });
        }
        let flat: Vec<f64> = matrix.rows()[row + 1 - l..=row]
            .iter()
            .flat_map(|r| {
                r.values
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| self.stats.standardize(j, v))
            })
            .collect();
        let mut out: Vec<f64> = self
            .projection
            .chunks_exact(flat.len())
            .map(|w| w.iter().zip(&flat).map(|(a, b)| a * b).sum())
            .collect();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        debug_assert_eq!(out.len(), self.out_dim);
        Ok(EmbeddingVector::new(matrix.rows()[row].timestamp, out))
    }
}

/// Free-function form of [`BaselineChartEmbedder::embed`].
pub fn baseline_chart_embedding(
    matrix: &FeatureMatrix,
    row: usize,
    window: WindowSpec,
    stats: &ColumnStats,
    seed: u64,
) -> Result<EmbeddingVector, EmbeddingError> {
    BaselineChartEmbedder::new(window, stats.clone(), seed).embed(matrix, row)
}

/// Principal-component projection onto the top `components.len()` directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReducer {
    mean: Vec<f64>,
    /// Row-major unit eigenvectors, largest eigenvalue first.
    components: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
}

impl LinearReducer {
    /// Fits on `vectors` (all of equal length). Each component's sign is fixed so that
    /// its largest-magnitude coordinate is positive.
    pub fn fit_vectors(vectors: &[&[f64]], out_dim: usize) -> Result<Self, EmbeddingError> {
        if vectors.len() < out_dim || vectors.is_empty() {
            return Err(EmbeddingError::InsufficientData {
                needed: out_dim.max(1),
                got: vectors.len(),
            });
        }
        let d = vectors[0].len();
        if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
            return Err(EmbeddingError::Dim {
                expected: d,
                got: bad.len(),
            });
        }
        if out_dim > d {
            return Err(EmbeddingError::Dim {
                expected: d,
                got: out_dim,
            });
        }
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; d];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(*v) {
                *m += x / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut centered = vec![0.0; d];
        for v in vectors {
            for ((c, x), m) in centered.iter_mut().zip(*v).zip(&mean) {
                *c = x - m;
            }
            for i in 0..d {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                for j in i..d {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / n;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let mut components = Vec::with_capacity(out_dim);
        let mut eigenvalues = Vec::with_capacity(out_dim);
        for &idx in order.iter().take(out_dim) {
            let mut comp: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            let pivot = comp
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best })
                .0;
            if comp[pivot] < 0.0 {
                comp.iter_mut().for_each(|v| *v = -*v);
            }
            components.push(comp);
            eigenvalues.push(eig.eigenvalues[idx]);
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn project_values(&self, values: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
        if values.len() != self.in_dim() {
            return Err(EmbeddingError::Dim {
                expected: self.in_dim(),
                got: values.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(values)
                    .zip(&self.mean)
                    .map(|((w, x), m)| w * (x - m))
                    .sum()
            })
            .collect())
    }

    pub fn project(&self, v: &EmbeddingVector) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(EmbeddingVector::new(v.timestamp, self.project_values(&v.values)?))
    }

    /// Projects every entry of a raw store into a reduced store.
    pub fn reduce_store(&self, store: &EmbeddingStore) -> Result<EmbeddingStore, EmbeddingError> {
        let mut out = EmbeddingStore::new(EmbeddingKind::NewsReduced);
        for v in store.iter() {
            out.insert(self.project(v)?)?;
        }
        Ok(out)
    }
}

/// Fits the 768 -> 128 news reducer. Pass only candidate-pool vectors.
pub fn fit_linear_reducer(store: &EmbeddingStore) -> Result<LinearReducer, EmbeddingError> {
    if store.kind() != EmbeddingKind::NewsRaw {
        return Err(EmbeddingError::Kind {
            expected: EmbeddingKind::NewsRaw,
            got: store.kind(),
        });
    }
    let vectors: Vec<&[f64]> = store.iter().map(|v| v.values.as_slice()).collect();
    LinearReducer::fit_vectors(&vectors, CHART_DIM)
}

/// Mean of the vectors with `after < timestamp <= until`; `None` for an empty window.
/// The result is stamped with `until`.
pub fn mean_news_embedding(store: &EmbeddingStore, after: i64, until: i64) -> Option<EmbeddingVector> {
    let mut count = 0usize;
    let mut sum = vec![0.0; store.dim()];
    for v in store.range(after, until) {
        for (s, x) in sum.iter_mut().zip(&v.values) {
            *s += x;
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let n = count as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Some(EmbeddingVector::new(until, sum))
}

/// Elementwise sum of a chart vector and an optional reduced news vector.
pub fn combine_multimodal(
    chart: &EmbeddingVector,
    news: Option<&EmbeddingVector>,
) -> Result<EmbeddingVector, EmbeddingError> {
    let Some(news) = news else {
        return Ok(chart.clone());
    };
    if news.dim() != chart.dim() {
        return Err(EmbeddingError::Dim {
            expected: chart.dim(),
            got: news.dim(),
        });
    }
    let values = chart.values.iter().zip(&news.values).map(|(a, b)| a + b).collect();
    Ok(EmbeddingVector::new(chart.timestamp, values))
}

/// `1 - cos(a, b)` in `[0, 2]`; 1 when either vector has zero norm.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::Dim {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0))
}
