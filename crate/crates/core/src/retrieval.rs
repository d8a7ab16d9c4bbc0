//! Exact top-k retrieval of past candidate bars for a query bar.
//!
//! Only candidates strictly older than the query are eligible. Distance ties are
//! broken by older timestamp first, so results never depend on insertion order.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{cosine_distance, EmbeddingStore, EmbeddingVector};
use crate::indicators::FeatureVector;

pub const DEFAULT_TOP_K: usize = 30;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no eligible candidates for query at {0}")]
    EmptyPool(i64),
    #[error("query width {query} does not match pool width {pool}")]
    Width { query: usize, pool: usize },
    #[error("no embedding for pool candidate at {0}")]
    MissingEmbedding(i64),
    #[error("pool has no feature rows")]
    NoFeatures,
    #[error("pool member {0} has timestamps out of order")]
    Unordered(i64),
    #[error("ranking cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMethod {
    Euclidean,
    ChartEmbedding,
    Multimodal,
    Random,
}

impl RankingMethod {
    pub const ALL: [RankingMethod; 4] = [
        Self::Random,
        Self::Euclidean,
        Self::ChartEmbedding,
        Self::Multimodal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Euclidean => "euclidean",
            Self::ChartEmbedding => "chart_embedding",
            Self::Multimodal => "multimodal",
            Self::Random => "random",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Self::Random => "Random Sampling",
            Self::Euclidean => "Euclidean Distance",
            Self::ChartEmbedding => "Chart Embedding",
            Self::Multimodal => "Multimodal Embedding",
        }
    }

    pub fn is_distance(self) -> bool {
        !matches!(self, Self::Random)
    }
}

impl std::fmt::Display for RankingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RankingMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "chart_embedding" | "chart" => Ok(Self::ChartEmbedding),
            "multimodal" => Ok(Self::Multimodal),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown ranking method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub timestamp: i64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_index: usize,
    pub query_timestamp: i64,
    pub method: RankingMethod,
    pub neighbors: Vec<Neighbor>,
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Bars eligible as neighbors, kept sorted by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    indices: Vec<usize>,
    timestamps: Vec<i64>,
    features: Option<Vec<Vec<f64>>>,
}

impl CandidatePool {
    /// Pool addressed by `(series index, timestamp)` without feature rows.
    pub fn from_members(members: impl IntoIterator<Item = (usize, i64)>) -> Self {
        let mut m: Vec<(usize, i64)> = members.into_iter().collect();
        m.sort_by_key(|&(i, t)| (t, i));
        m.dedup_by_key(|x| x.1);
        Self {
            indices: m.iter().map(|x| x.0).collect(),
            timestamps: m.iter().map(|x| x.1).collect(),
            features: None,
        }
    }

    /// Pool carrying a feature row per member.
    pub fn with_features(members: impl IntoIterator<Item = (usize, FeatureVector)>) -> Self {
        let mut m: Vec<(usize, FeatureVector)> = members.into_iter().collect();
        m.sort_by_key(|(i, f)| (f.timestamp, *i));
        m.dedup_by_key(|x| x.1.timestamp);
        Self {
            indices: m.iter().map(|x| x.0).collect(),
            timestamps: m.iter().map(|x| x.1.timestamp).collect(),
            features: Some(m.into_iter().map(|x| x.1.values).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn features(&self) -> Option<&[Vec<f64>]> {
        self.features.as_deref()
    }

    /// Number of members strictly older than `timestamp`.
    fn eligible(&self, timestamp: i64) -> usize {
        self.timestamps.partition_point(|&t| t < timestamp)
    }

    fn index_of_timestamp(&self, timestamp: i64) -> Option<usize> {
        self.timestamps
            .binary_search(&timestamp)
            .ok()
            .map(|p| self.indices[p])
    }
}

/// Keeps the `k` smallest `(score, timestamp)` pairs in ascending order.
fn top_k(mut scored: Vec<Neighbor>, k: usize) -> Vec<Neighbor> {
    let cmp = |a: &Neighbor, b: &Neighbor| a.score.total_cmp(&b.score).then(a.timestamp.cmp(&b.timestamp));
    if scored.len() > k && k > 0 {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    } else if k == 0 {
        scored.clear();
    }
    scored.sort_by(cmp);
    scored
}

pub fn rank_euclidean(
    query_index: usize,
    query: &FeatureVector,
    pool: &CandidatePool,
    k: usize,
) -> Result<Ranking, RetrievalError> {
    let features = pool.features().ok_or(RetrievalError::NoFeatures)?;
    let n = pool.eligible(query.timestamp);
    if n == 0 {
        return Err(RetrievalError::EmptyPool(query.timestamp));
    }
    if let Some(row) = features.first() {
        if row.len() != query.values.len() {
            return Err(RetrievalError::Width {
                query: query.values.len(),
                pool: row.len(),
            });
        }
    }
    let scored = (0..n)
        .map(|p| Neighbor {
            index: pool.indices[p],
            timestamp: pool.timestamps[p],
            score: features[p]
                .iter()
                .zip(&query.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        })
        .collect();
    Ok(Ranking {
        query_index,
        query_timestamp: query.timestamp,
        method: RankingMethod::Euclidean,
        neighbors: top_k(scored, k),
    })
}

/// Cosine-distance ranking against `store` (chart or multimodal embeddings).
pub fn rank_by_embedding(
    query_index: usize,
    query: &EmbeddingVector,
    pool: &CandidatePool,
    store: &EmbeddingStore,
    method: RankingMethod,
    k: usize,
) -> Result<Ranking, RetrievalError> {
    let n = pool.eligible(query.timestamp);
    if n == 0 {
        return Err(RetrievalError::EmptyPool(query.timestamp));
    }
    if query.dim() != store.dim() {
        return Err(RetrievalError::Width {
            query: query.dim(),
            pool: store.dim(),
        });
    }
    let scored = (0..n)
        .map(|p| {
            let ts = pool.timestamps[p];
            let candidate = store.get(ts).ok_or(RetrievalError::MissingEmbedding(ts))?;
            let score = cosine_distance(&query.values, &candidate.values).map_err(|_| {
                RetrievalError::Width {
                    query: query.dim(),
                    pool: candidate.dim(),
                }
            })?;
            Ok(Neighbor {
                index: pool.indices[p],
                timestamp: ts,
                score,
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    Ok(Ranking {
        query_index,
        query_timestamp: query.timestamp,
        method,
        neighbors: top_k(scored, k),
    })
}

/// Uniform sample of `k` distinct eligible candidates; score is the draw order.
pub fn rank_random(
    query_index: usize,
    query_timestamp: i64,
    pool: &CandidatePool,
    k: usize,
    seed: u64,
) -> Result<Ranking, RetrievalError> {
    let n = pool.eligible(query_timestamp);
    if n == 0 {
        return Err(RetrievalError::EmptyPool(query_timestamp));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let neighbors = sample(&mut rng, n, k.min(n))
        .into_iter()
        .enumerate()
        .map(|(order, p)| Neighbor {
            index: pool.indices[p],
            timestamp: pool.timestamps[p],
            score: order as f64,
        })
        .collect();
    Ok(Ranking {
        query_index,
        query_timestamp,
        method: RankingMethod::Random,
        neighbors,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRow {
    query_timestamp: i64,
    method: RankingMethod,
    rank: usize,
    candidate_timestamp: i64,
    score: f64,
}

/// Writes rankings as `query_timestamp,method,rank,candidate_timestamp,score` (rank from 1).
pub fn write_rankings<'a>(
    rankings: impl IntoIterator<Item = &'a Ranking>,
    sink: impl Write,
) -> Result<(), RetrievalError> {
    let err = |e: csv::Error| RetrievalError::Cache(e.to_string());
    let mut w = csv::Writer::from_writer(sink);
    for r in rankings {
        for (i, n) in r.neighbors.iter().enumerate() {
            w.serialize(CacheRow {
                query_timestamp: r.query_timestamp,
                method: r.method,
                rank: i + 1,
                candidate_timestamp: n.timestamp,
                score: n.score,
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| RetrievalError::Cache(e.to_string()))
}

/// Reads a ranking cache. `query_index` maps query timestamps back to series indices;
/// candidate indices are resolved through `pool`.
pub fn read_rankings(
    source: impl Read,
    pool: &CandidatePool,
    query_index: impl Fn(i64) -> Option<usize>,
) -> Result<Vec<Ranking>, RetrievalError> {
    let mut r = csv::Reader::from_reader(source);
    let mut out: Vec<Ranking> = Vec::new();
    for (line, row) in r.deserialize::<CacheRow>().enumerate() {
        let row = row.map_err(|e| RetrievalError::Cache(format!("row {}: {e}", line + 1)))?;
        let index = pool
            .index_of_timestamp(row.candidate_timestamp)
            .ok_or_else(|| RetrievalError::Cache(format!("candidate {} not in pool", row.candidate_timestamp)))?;
        let neighbor = Neighbor {
            index,
            timestamp: row.candidate_timestamp,
            score: row.score,
        };
        match out.last_mut() {
            Some(last)
                if last.query_timestamp == row.query_timestamp
                    && last.method == row.method
                    && row.rank == last.neighbors.len() + 1 =>
            {
                last.neighbors.push(neighbor)
            }
            _ => {
                if row.rank != 1 {
                    return Err(RetrievalError::Cache(format!(
                        "row {}: rank {} does not continue a ranking",
                        line + 1,
                        row.rank
                    )));
                }
                let qi = query_index(row.query_timestamp).ok_or_else(|| {
                    RetrievalError::Cache(format!("unknown query timestamp {}", row.query_timestamp))
                })?;
                out.push(Ranking {
                    query_index: qi,
                    query_timestamp: row.query_timestamp,
                    method: row.method,
                    neighbors: vec![neighbor],
                });
            }
        }
    }
    Ok(out)
}
