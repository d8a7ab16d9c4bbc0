//! Multiclass gradient-boosted trees with a softmax objective, plus evaluation metrics.
//!
//! Each round fits one regression tree per class to the first and second derivatives
//! of the class-weighted multiclass log-loss. Hessians use the `2 p (1 - p)` form and
//! leaves are `-G / (H + l2_reg)` scaled by the learning rate. Split search is exact
//! greedy; ties go to the lowest feature index, then the lowest threshold.

mod metrics;
mod tree;

pub use metrics::{evaluate, ConfusionMatrix, Metrics};
pub use tree::{Node, RegressionTree};

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::FeatureMatrix;
use crate::market_data::DirectionLabel;
use crate::votes::softmax;
use tree::{grow_tree, ColumnData, TreeParams};

pub const NUM_CLASSES: usize = 3;
const MIN_HESSIAN: f64 = 1e-16;

#[derive(Debug, Error)]
pub enum GbtError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot train: {0}")]
    Degenerate(String),
    #[error("row width {got} does not match model width {expected}")]
    Shape { expected: usize, got: usize },
    #[error("{rows} rows but {labels} labels")]
    Alignment { rows: usize, labels: usize },
    #[error("model serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub class_weights: [f64; NUM_CLASSES],
    /// Recorded with the model; training uses no subsampling, so it does not change the fit.
    pub seed: u64,
    pub l2_reg: f64,
    pub min_child_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            learning_rate: 0.3,
            max_depth: 6,
            class_weights: [1.0; NUM_CLASSES],
            seed: 0,
            l2_reg: 1.0,
            min_child_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GbtError> {
        let bad = |m: &str| Err(GbtError::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be >= 1");
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad("class weights must be positive");
        }
        if !(self.l2_reg >= 0.0 && self.min_child_weight >= 0.0) {
            return bad("l2_reg and min_child_weight must be non-negative");
        }
        Ok(())
    }

    pub fn with_class_weights(mut self, weights: [f64; NUM_CLASSES]) -> Self {
        self.class_weights = weights;
        self
    }
}

/// `N / (3 * count_c)` per class; absent classes get weight 1.
pub fn balanced_class_weights(labels: &[DirectionLabel]) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for l in labels {
        counts[l.class_index()] += 1;
    }
    let n = labels.len() as f64;
    counts.map(|c| if c == 0 { 1.0 } else { n / (NUM_CLASSES as f64 * c as f64) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub num_features: usize,
    pub base_score: [f64; NUM_CLASSES],
    /// One entry per round, one tree per class.
    pub rounds: Vec<[RegressionTree; NUM_CLASSES]>,
}

impl Ensemble {
    /// Model with no trees: predictions are the softmax of `base_score`.
    pub fn constant(num_features: usize, base_score: [f64; NUM_CLASSES]) -> Self {
        Self {
            num_features,
            base_score,
            rounds: Vec::new(),
        }
    }

    pub fn margins(&self, row: &[f64]) -> Result<[f64; NUM_CLASSES], GbtError> {
        if row.len() != self.num_features {
            return Err(GbtError::Shape {
                expected: self.num_features,
                got: row.len(),
            });
        }
        let mut m = self.base_score;
        for trees in &self.rounds {
            for (c, t) in trees.iter().enumerate() {
                m[c] += t.predict(row);
            }
        }
        Ok(m)
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<[f64; NUM_CLASSES], GbtError> {
        Ok(softmax(self.margins(row)?))
    }

    /// Arg-max class; ties go to the lower class index.
    pub fn predict(&self, row: &[f64]) -> Result<DirectionLabel, GbtError> {
        let m = self.margins(row)?;
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if m[c] > m[best] {
                best = c;
            }
        }
        Ok(DirectionLabel::from_class_index(best).expect("class index < 3"))
    }

    pub fn predict_matrix(&self, x: &FeatureMatrix) -> Result<Vec<DirectionLabel>, GbtError> {
        x.rows().iter().map(|r| self.predict(&r.values)).collect()
    }

    pub fn max_depth(&self) -> usize {
        self.rounds
            .iter()
            .flat_map(|r| r.iter().map(RegressionTree::depth))
            .max()
            .unwrap_or(0)
    }

    pub fn to_json(&self, sink: impl Write) -> Result<(), GbtError> {
        Ok(serde_json::to_writer_pretty(sink, self)?)
    }

    pub fn from_json(source: impl Read) -> Result<Self, GbtError> {
        Ok(serde_json::from_reader(source)?)
    }
}

/// Per-round weighted mean training log-loss, index 0 being the untrained model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub log_loss: Vec<f64>,
}

pub fn fit(
    x: &FeatureMatrix,
    y: &[DirectionLabel],
    config: &TrainConfig,
) -> Result<Ensemble, GbtError> {
    let rows: Vec<&[f64]> = x.rows().iter().map(|r| r.values.as_slice()).collect();
    fit_rows(&rows, x.width(), y, config).map(|(m, _)| m)
}

/// Trains on raw rows, also returning the per-round training loss.
pub fn fit_rows(
    rows: &[&[f64]],
    width: usize,
    y: &[DirectionLabel],
    config: &TrainConfig,
) -> Result<(Ensemble, TrainHistory), GbtError> {
    config.validate()?;
    if rows.len() != y.len() {
        return Err(GbtError::Alignment {
            rows: rows.len(),
            labels: y.len(),
        });
    }
    if rows.len() < 2 {
        return Err(GbtError::Degenerate(format!("{} rows", rows.len())));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(GbtError::Shape {
            expected: width,
            got: bad.len(),
        });
    }
    if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(GbtError::Degenerate("non-finite feature value".into()));
    }
    let mut present = [false; NUM_CLASSES];
    for l in y {
        present[l.class_index()] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(GbtError::Degenerate("fewer than two classes present".into()));
    }

    let n = rows.len();
    let data = ColumnData::new(rows, width);
    let weights: Vec<f64> = y.iter().map(|l| config.class_weights[l.class_index()]).collect();
    let targets: Vec<usize> = y.iter().map(|l| l.class_index()).collect();
    let params = TreeParams {
        max_depth: config.max_depth,
        l2_reg: config.l2_reg,
        min_child_weight: config.min_child_weight,
        learning_rate: config.learning_rate,
    };

    let mut model = Ensemble::constant(width, [0.0; NUM_CLASSES]);
    let mut margins = vec![model.base_score; n];
    let mut history = TrainHistory::default();
    history.log_loss.push(weighted_log_loss(&margins, &targets, &weights));

    let mut grad = vec![vec![0.0; n]; NUM_CLASSES];
    let mut hess = vec![vec![0.0; n]; NUM_CLASSES];
    for _ in 0..config.rounds {
        for i in 0..n {
            let p = softmax(margins[i]);
            for c in 0..NUM_CLASSES {
                let target = if targets[i] == c { 1.0 } else { 0.0 };
                grad[c][i] = (p[c] - target) * weights[i];
                hess[c][i] = (2.0 * p[c] * (1.0 - p[c]) * weights[i]).max(MIN_HESSIAN);
            }
        }
        let trees: [RegressionTree; NUM_CLASSES] = std::array::from_fn(|c| {
            let (tree, per_row) = grow_tree(&data, &grad[c], &hess[c], params);
            for (m, v) in margins.iter_mut().zip(per_row) {
                m[c] += v;
            }
            tree
        });
        model.rounds.push(trees);
        history.log_loss.push(weighted_log_loss(&margins, &targets, &weights));
    }
    Ok((model, history))
}

fn weighted_log_loss(margins: &[[f64; NUM_CLASSES]], targets: &[usize], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut wsum = 0.0;
    for ((m, &t), &w) in margins.iter().zip(targets).zip(weights) {
        let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + m.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += w * (lse - m[t]);
        wsum += w;
    }
    total / wsum
}
