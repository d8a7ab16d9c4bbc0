//! Neighbor-label vote features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::{FeatureMatrix, FeatureVector, IndicatorError};
use crate::market_data::DirectionLabel;
use crate::retrieval::Ranking;

/// Neighbor counts the vote features are evaluated at.
pub const K_GRID: [usize; 6] = [5, 10, 15, 20, 25, 30];
pub const VOTE_COLUMNS: [&str; 3] = ["vote_c0", "vote_c1", "vote_c2"];

#[derive(Debug, Error)]
pub enum VoteError {
    #[error("k = {0} is not in the supported grid {K_GRID:?}")]
    UnsupportedK(usize),
    #[error("neighbor at series index {0} has no label")]
    MissingLabel(usize),
    #[error("{rows} rows but {votes} votes")]
    Alignment { rows: usize, votes: usize },
    #[error(transparent)]
    Matrix(#[from] IndicatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteVector {
    pub k: usize,
    pub counts: [u32; 3],
}

impl VoteVector {
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedVote {
    pub probs: [f64; 3],
}

/// Counts labels among the first `min(k, len)` neighbors.
pub fn count_votes(
    ranking: &Ranking,
    labels: impl Fn(usize) -> Option<DirectionLabel>,
    k: usize,
) -> Result<VoteVector, VoteError> {
    if !K_GRID.contains(&k) {
        return Err(VoteError::UnsupportedK(k));
    }
    let mut counts = [0u32; 3];
    for n in ranking.neighbors.iter().take(k) {
        let label = labels(n.index).ok_or(VoteError::MissingLabel(n.index))?;
        counts[label.class_index()] += 1;
    }
    Ok(VoteVector { k, counts })
}

/// Softmax of the raw counts (max-subtracted).
pub fn softmax_normalize(votes: &VoteVector) -> NormalizedVote {
    NormalizedVote {
        probs: softmax(votes.counts.map(f64::from)),
    }
}

pub(crate) fn softmax(x: [f64; 3]) -> [f64; 3] {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = x.map(|v| (v - max).exp());
    let sum: f64 = e.iter().sum();
    e.map(|v| v / sum)
}

/// Appends `vote_c0, vote_c1, vote_c2` to every row.
pub fn augment_features(
    matrix: &FeatureMatrix,
    votes: &[NormalizedVote],
) -> Result<FeatureMatrix, VoteError> {
    if matrix.len() != votes.len() {
        return Err(VoteError::Alignment {
            rows: matrix.len(),
            votes: votes.len(),
        });
    }
    let mut names = matrix.names().to_vec();
    names.extend(VOTE_COLUMNS.iter().map(|s| s.to_string()));
    let rows = matrix
        .rows()
        .iter()
        .zip(votes)
        .map(|(r, v)| {
            let mut values = r.values.clone();
            values.extend_from_slice(&v.probs);
            FeatureVector {
                timestamp: r.timestamp,
                values,
            }
        })
        .collect();
    Ok(FeatureMatrix::new(names, rows, matrix.warmup())?)
}
