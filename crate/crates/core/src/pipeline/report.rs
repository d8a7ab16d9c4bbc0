use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::gbt::Metrics;
use crate::retrieval::RankingMethod;

/// Test-split scores of one trained model (or the mean over random repetitions).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CellScore {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub directional_accuracy: Option<f64>,
}

impl From<&Metrics> for CellScore {
    fn from(m: &Metrics) -> Self {
        Self {
            accuracy: m.accuracy,
            weighted_f1: m.weighted_f1,
            directional_accuracy: m.directional_accuracy,
        }
    }
}

impl CellScore {
    /// Componentwise mean; directional accuracy averages the runs that have one.
    pub fn mean(scores: &[CellScore]) -> CellScore {
        let n = scores.len().max(1) as f64;
        let dir: Vec<f64> = scores.iter().filter_map(|s| s.directional_accuracy).collect();
        CellScore {
            accuracy: scores.iter().map(|s| s.accuracy).sum::<f64>() / n,
            weighted_f1: scores.iter().map(|s| s.weighted_f1).sum::<f64>() / n,
            directional_accuracy: (!dir.is_empty()).then(|| dir.iter().sum::<f64>() / dir.len() as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResults {
    pub method: RankingMethod,
    /// Aligned with [`ResultsTable::k_grid`].
    pub test: Vec<CellScore>,
    pub validation: Vec<CellScore>,
    /// K with the best validation weighted F1 (lowest K on ties).
    pub selected_k: usize,
}

impl MethodResults {
    pub fn average(&self) -> CellScore {
        CellScore {
            directional_accuracy: None,
            ..CellScore::mean(&self.test)
        }
    }
}

/// Methods × K grid of test scores with the no-feature baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub k_grid: Vec<usize>,
    pub baseline: CellScore,
    pub baseline_validation: CellScore,
    pub methods: Vec<MethodResults>,
    pub random_repetitions: usize,
    pub split: SplitSizes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitSizes {
    pub bars: usize,
    pub candidates: usize,
    pub pool: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl ResultsTable {
    pub fn method(&self, method: RankingMethod) -> Option<&MethodResults> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn cell(&self, method: RankingMethod, k: usize) -> Option<CellScore> {
        let col = self.k_grid.iter().position(|&x| x == k)?;
        self.method(method).map(|m| m.test[col])
    }

    /// `(accuracy delta, F1 delta)` against the baseline.
    pub fn delta(&self, score: &CellScore) -> (f64, f64) {
        (
            score.accuracy - self.baseline.accuracy,
            score.weighted_f1 - self.baseline.weighted_f1,
        )
    }

    /// One row per (method, K) plus an `average` row per method and a `baseline` row.
    pub fn write_csv(&self, sink: impl Write) -> Result<(), PipelineError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "method",
            "k",
            "accuracy",
            "weighted_f1",
            "directional_accuracy",
            "delta_accuracy",
            "delta_f1",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let b = &self.baseline;
        w.write_record([
            "baseline".to_string(),
            String::new(),
            b.accuracy.to_string(),
            b.weighted_f1.to_string(),
            opt(b.directional_accuracy),
            "0".into(),
            "0".into(),
        ])?;
        for m in &self.methods {
            let avg = m.average();
            let rows = self
                .k_grid
                .iter()
                .map(|k| k.to_string())
                .zip(m.test.iter().copied())
                .chain(std::iter::once(("average".to_string(), avg)));
            for (k, s) in rows {
                let (da, df) = self.delta(&s);
                w.write_record([
                    m.method.as_str().to_string(),
                    k,
                    s.accuracy.to_string(),
                    s.weighted_f1.to_string(),
                    opt(s.directional_accuracy),
                    da.to_string(),
                    df.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| PipelineError::Csv(e.into()))
    }

    /// Two aligned tables (accuracy in percent, weighted F1) with deltas in parentheses.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let mut header = vec!["Method".to_string(), "No FE".to_string()];
        header.extend(self.k_grid.iter().map(|k| format!("Top {k}")));
        header.push("Average".into());

        type Pick = fn(&CellScore) -> f64;
        let sections: [(&str, Pick, f64, usize); 2] = [
            ("Accuracy (%)", |s| s.accuracy, 100.0, 3),
            ("F1 score", |s| s.weighted_f1, 1.0, 3),
        ];
        for (title, pick, scale, digits) in sections {
            let base = pick(&self.baseline);
            let mut rows = Vec::new();
            for m in &self.methods {
                let mut row = vec![m.method.title().to_string(), format!("{:.*}", digits, base * scale)];
                for s in m.test.iter().chain(std::iter::once(&m.average())) {
                    let v = pick(s);
                    row.push(format!("{:.*} ({:+.*})", digits, v * scale, digits, (v - base) * scale));
                }
                rows.push(row);
            }
            let widths: Vec<usize> = (0..header.len())
                .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
                .collect();
            let line = |cells: &[String]| {
                let padded: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect();
                format!("| {} |\n", padded.join(" | "))
            };
            let _ = writeln!(out, "### {title}\n");
            out.push_str(&line(&header));
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&line(&rule));
            for r in &rows {
                out.push_str(&line(r));
            }
            out.push('\n');
        }
        let s = &self.split;
        let _ = writeln!(
            out,
            "Bars: {}; candidates: {} ({} in the retrieval pool); train/validation/test: {}/{}/{}; random repetitions: {}.",
            s.bars, s.candidates, s.pool, s.train, s.validation, s.test, self.random_repetitions
        );
        out
    }
}

/// Percentile bootstrap of the mean per-row accuracy gap between two model families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub margin: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence: f64,
    pub samples: usize,
}

/// `diffs[i]` is the per-row difference in correctness rate; rows are resampled.
pub fn bootstrap_mean_ci(diffs: &[f64], samples: usize, confidence: f64, seed: u64) -> Option<BootstrapSummary> {
    if diffs.is_empty() || samples == 0 {
        return None;
    }
    let n = diffs.len();
    let margin = diffs.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..samples)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let at = |q: f64| means[((q * (samples - 1) as f64).round() as usize).min(samples - 1)];
    Some(BootstrapSummary {
        margin,
        ci_low: at(tail),
        ci_high: at(1.0 - tail),
        confidence,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(a: f64, f: f64) -> CellScore {
        CellScore { accuracy: a, weighted_f1: f, directional_accuracy: None }
    }

    fn table() -> ResultsTable {
        let k_grid = vec![5, 10];
        ResultsTable {
            k_grid,
            baseline: score(0.5, 0.4),
            baseline_validation: score(0.5, 0.4),
            methods: vec![MethodResults {
                method: RankingMethod::Euclidean,
                test: vec![score(0.6, 0.5), score(0.4, 0.45)],
                validation: vec![score(0.5, 0.5), score(0.5, 0.5)],
                selected_k: 5,
            }],
            random_repetitions: 1,
            split: SplitSizes::default(),
        }
    }

    #[test]
    fn averages_and_deltas() {
        let t = table();
        let avg = t.methods[0].average();
        assert!((avg.accuracy - 0.5).abs() < 1e-15);
        assert!((avg.weighted_f1 - 0.475).abs() < 1e-15);
        let (da, df) = t.delta(&t.cell(RankingMethod::Euclidean, 5).unwrap());
        assert!((da - 0.1).abs() < 1e-12 && (df - 0.1).abs() < 1e-12);
        assert!(t.cell(RankingMethod::Random, 5).is_none());
    }

    #[test]
    fn csv_and_markdown_layout() {
        let t = table();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 1 + 3);
        assert!(text.lines().nth(4).unwrap().starts_with("euclidean,average,0.5,"));
        let md = t.to_markdown();
        assert!(md.contains("| Method "));
        assert!(md.contains("No FE"));
        assert!(md.contains("Top 5"));
        assert!(md.contains("Average"));
        assert!(md.contains("60.000 (+10.000)"));
    }

    #[test]
    fn bootstrap_brackets_mean() {
        let diffs: Vec<f64> = (0..200).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let b = bootstrap_mean_ci(&diffs, 500, 0.95, 7).unwrap();
        assert!((b.margin - 0.25).abs() < 1e-12);
        assert!(b.ci_low < 0.25 && b.ci_high > 0.25);
        assert_eq!(b, bootstrap_mean_ci(&diffs, 500, 0.95, 7).unwrap());
        assert!(bootstrap_mean_ci(&[], 10, 0.95, 0).is_none());
    }
}
