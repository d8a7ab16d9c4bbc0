use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::backtest::BacktestConfig;
use crate::embeddings::DEFAULT_WINDOW;
use crate::gbt::TrainConfig;
use crate::market_data::{DataFormat, GapPolicy, DEFAULT_LABEL_THRESHOLD};
use crate::retrieval::RankingMethod;
use crate::votes::K_GRID;

/// 2017-08-23 16:00 UTC.
pub const DEFAULT_START_MS: i64 = 1_503_504_000_000;
/// 2023-01-16 00:00 UTC (exclusive), so the last bar opens at 2023-01-15 20:00.
pub const DEFAULT_END_MS: i64 = 1_673_827_200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSource {
    /// Candle file; when absent, candles are fetched over `[start_ms, end_ms)`.
    pub path: Option<PathBuf>,
    /// Defaults to the file extension.
    pub format: Option<DataFormat>,
    pub symbol: String,
    pub start_ms: i64,
    pub end_ms: i64,
    pub gaps: GapPolicy,
}

impl Default for DataSource {
    fn default() -> Self {
        Self {
            path: None,
            format: None,
            symbol: "BTCUSDT".into(),
            start_ms: DEFAULT_START_MS,
            end_ms: DEFAULT_END_MS,
            gaps: GapPolicy::Error,
        }
    }
}

impl DataSource {
    pub fn resolved_format(&self) -> Result<DataFormat, PipelineError> {
        if let Some(f) = self.format {
            return Ok(f);
        }
        let path = self
            .path
            .as_deref()
            .ok_or_else(|| PipelineError::Config("no data path".into()))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) => ext.parse().map_err(PipelineError::Config),
            None => Err(PipelineError::Config(format!(
                "cannot infer the format of {}",
                path.display()
            ))),
        }
    }
}

/// Chronological split: the first `candidate_fraction` of bars form the retrieval pool,
/// the rest is divided `train : validation : test` with floors for train and validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub candidate_fraction: f64,
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            candidate_fraction: 0.8,
            train: 8,
            validation: 1,
            test: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSources {
    /// Precomputed `chart` store; the seeded baseline embedder is used otherwise.
    pub chart: Option<PathBuf>,
    /// `news_raw` or `news_reduced` store.
    pub news: Option<PathBuf>,
    /// Precomputed `multimodal` store, used as is.
    pub multimodal: Option<PathBuf>,
    /// With raw news: reduce every article first, then average per bar.
    pub reduce_then_average: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelChoice {
    pub method: RankingMethod,
    pub k: usize,
}

impl Default for ModelChoice {
    fn default() -> Self {
        Self {
            method: RankingMethod::Multimodal,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub methods: Vec<RankingMethod>,
    pub k_grid: Vec<usize>,
    pub random_repetitions: usize,
    pub seed: u64,
    pub label_threshold: f64,
    pub window: usize,
    /// Weight classes by `N / (3 count_c)` on the training split.
    pub balanced_class_weights: bool,
    /// Pick each method's K by validation weighted F1 for the backtested model.
    pub select_k_on_validation: bool,
    pub bootstrap_samples: usize,
    pub output_dir: PathBuf,
    /// Ranking cache read when present and written by `rank`.
    pub rankings_cache: Option<PathBuf>,
    pub data: DataSource,
    pub split: SplitConfig,
    pub embeddings: EmbeddingSources,
    pub train: TrainConfig,
    pub backtest: BacktestConfig,
    pub best_model: ModelChoice,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: RankingMethod::ALL.to_vec(),
            k_grid: K_GRID.to_vec(),
            random_repetitions: 100,
            seed: 42,
            label_threshold: DEFAULT_LABEL_THRESHOLD,
            window: DEFAULT_WINDOW,
            balanced_class_weights: true,
            select_k_on_validation: false,
            bootstrap_samples: 1000,
            output_dir: PathBuf::from("output"),
            rankings_cache: None,
            data: DataSource::default(),
            split: SplitConfig::default(),
            embeddings: EmbeddingSources::default(),
            train: TrainConfig::default(),
            backtest: BacktestConfig::default(),
            best_model: ModelChoice::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let config: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.methods.is_empty() {
            return bad("no ranking methods".into());
        }
        if self.k_grid.is_empty() {
            return bad("empty K grid".into());
        }
        if let Some(k) = self.k_grid.iter().find(|k| !K_GRID.contains(k)) {
            return bad(format!("K = {k} is not in {K_GRID:?}"));
        }
        let mut sorted = self.k_grid.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.k_grid {
            return bad("K grid must be strictly increasing".into());
        }
        if self.methods.contains(&RankingMethod::Random) && self.random_repetitions == 0 {
            return bad("random_repetitions must be >= 1".into());
        }
        if !(self.label_threshold > 0.0 && self.label_threshold < 1.0) {
            return bad("label_threshold must be in (0, 1)".into());
        }
        if self.window < 2 {
            return bad("window must be >= 2".into());
        }
        let s = self.split;
        if !(s.candidate_fraction > 0.0 && s.candidate_fraction < 1.0) {
            return bad("candidate_fraction must be in (0, 1)".into());
        }
        if s.train == 0 || s.test == 0 {
            return bad("train and test ratios must be positive".into());
        }
        if !self.methods.contains(&self.best_model.method) {
            return bad(format!("best model method {} is not run", self.best_model.method));
        }
        if !self.k_grid.contains(&self.best_model.k) {
            return bad(format!("best model K = {} is not in the grid", self.best_model.k));
        }
        if self.data.start_ms >= self.data.end_ms && self.data.path.is_none() {
            return bad("fetch range is empty".into());
        }
        self.train.validate()?;
        self.backtest.validate()?;
        Ok(())
    }
}
