use serde::{Deserialize, Serialize};

use super::{GbtError, NUM_CLASSES};
use crate::market_data::DirectionLabel;

/// `counts[truth][prediction]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_labels(predictions: &[DirectionLabel], truth: &[DirectionLabel]) -> Self {
        let mut counts = [[0; NUM_CLASSES]; NUM_CLASSES];
        for (p, t) in predictions.iter().zip(truth) {
            counts[t.class_index()][p.class_index()] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> usize {
        self.counts.iter().map(|row| row[class]).sum()
    }

    /// Per-class F1; zero when precision + recall has a zero denominator.
    pub fn f1(&self, class: usize) -> f64 {
        let tp = self.counts[class][class] as f64;
        let predicted = self.predicted(class) as f64;
        let actual = self.support(class) as f64;
        if predicted == 0.0 || actual == 0.0 {
            return 0.0;
        }
        let precision = tp / predicted;
        let recall = tp / actual;
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    /// Accuracy over rows where both prediction and truth are long or short.
    pub directional_accuracy: Option<f64>,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(predictions: &[DirectionLabel], truth: &[DirectionLabel]) -> Result<Metrics, GbtError> {
    if predictions.len() != truth.len() {
        return Err(GbtError::Alignment {
            rows: predictions.len(),
            labels: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(GbtError::Degenerate("no rows to evaluate".into()));
    }
    let confusion = ConfusionMatrix::from_labels(predictions, truth);
    let n = truth.len() as f64;
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion.counts[c][c]).sum();
    let weighted_f1 = (0..NUM_CLASSES)
        .map(|c| confusion.support(c) as f64 / n * confusion.f1(c))
        .sum();

    let (mut hits, mut total) = (0usize, 0usize);
    for (p, t) in predictions.iter().zip(truth) {
        if p.is_directional() && t.is_directional() {
            total += 1;
            hits += usize::from(p == t);
        }
    }
    Ok(Metrics {
        accuracy: correct as f64 / n,
        weighted_f1,
        directional_accuracy: (total > 0).then(|| hits as f64 / total as f64),
        confusion,
    })
}
