//! End-to-end experiment: split, fit candidate statistics, rank, vote, train the
//! methods × K grid, evaluate, bootstrap and backtest.

mod config;
mod report;

pub use config::{
    DataSource, EmbeddingSources, ExperimentConfig, ModelChoice, SplitConfig, DEFAULT_END_MS,
    DEFAULT_START_MS,
};
pub use report::{bootstrap_mean_ci, BootstrapSummary, CellScore, MethodResults, ResultsTable, SplitSizes};

use std::collections::BTreeMap;
use std::fs::File;
use std::hash::{DefaultHasher, Hasher};
use std::io::{BufReader, BufWriter};
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::{self, BacktestError, BacktestResult, EquityCurve};
use crate::embeddings::{
    combine_multimodal, load_embeddings, mean_news_embedding, BaselineChartEmbedder, ColumnStats,
    EmbeddingError, EmbeddingKind, EmbeddingStore, EmbeddingVector, LinearReducer, WindowSpec, CHART_DIM,
};
use crate::gbt::{self, balanced_class_weights, Ensemble, GbtError, Metrics, TrainConfig};
use crate::indicators::{assemble_features, FeatureMatrix, IndicatorError};
use crate::market_data::{
    compute_label_with, parse_candles, CandleSeries, DirectionLabel, FetchConfig, KlineClient,
    MarketDataError,
};
use crate::retrieval::{
    rank_by_embedding, rank_euclidean, rank_random, read_rankings, write_rankings, CandidatePool, Ranking,
    RankingMethod, RetrievalError,
};
use crate::votes::{count_votes, softmax_normalize, VoteError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot split {bars} bars: {reason}")]
    Split { bars: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error(transparent)]
    Indicator(#[from] IndicatorError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Vote(#[from] VoteError),
    #[error(transparent)]
    Gbt(#[from] GbtError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError>;
}

impl<T, E: Into<PipelineError>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage {
            stage,
            source: Box::new(e.into()),
        })
    }
}

/// Bar-index ranges of a chronological split. `test` runs to the end of the series.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub candidates: Range<usize>,
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

/// Splits `n` chronologically ordered points: candidates are the first
/// `floor(n * candidate_fraction)`, the remainder is divided by the ratios with
/// floors for train and validation and the rest going to test.
pub fn split_dataset(n: usize, config: &SplitConfig) -> Result<SplitPlan, PipelineError> {
    let err = |reason: String| PipelineError::Split { bars: n, reason };
    let candidates = ((n as f64 * config.candidate_fraction) + 1e-9).floor() as usize;
    let rest = n.saturating_sub(candidates);
    let total = u64::from(config.train + config.validation + config.test);
    if total == 0 {
        return Err(err("ratios sum to zero".into()));
    }
    let train = (rest as u64 * u64::from(config.train) / total) as usize;
    let validation = (rest as u64 * u64::from(config.validation) / total) as usize;
    let test = rest - train - validation;
    if candidates == 0 || train == 0 || test == 0 || (config.validation > 0 && validation == 0) {
        return Err(err(format!(
            "sizes {candidates}/{train}/{validation}/{test} leave an empty split"
        )));
    }
    let t0 = candidates;
    let v0 = t0 + train;
    let s0 = v0 + validation;
    Ok(SplitPlan {
        candidates: 0..candidates,
        train: t0..v0,
        validation: v0..s0,
        test: s0..n,
    })
}

/// Everything estimated from data before training: candidate-pool standardization,
/// the news reducer, and the training class weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedState {
    pub pool_stats: ColumnStats,
    pub reducer: Option<LinearReducer>,
    pub class_weights: [f64; 3],
}

impl FittedState {
    /// Hash over the bit patterns of every fitted number.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let mut put = |v: f64| h.write_u64(v.to_bits());
        self.pool_stats.mean.iter().chain(&self.pool_stats.std).for_each(|&v| put(v));
        if let Some(r) = &self.reducer {
            r.mean().iter().chain(r.eigenvalues()).for_each(|&v| put(v));
            r.components().iter().flatten().for_each(|&v| put(v));
        }
        self.class_weights.iter().for_each(|&v| put(v));
        h.finish()
    }
}

/// Reads candles from the configured file or fetches them from the exchange.
pub fn load_series(source: &DataSource) -> Result<CandleSeries, PipelineError> {
    match &source.path {
        Some(path) => {
            let format = source.resolved_format()?;
            let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
            Ok(parse_candles(
                BufReader::new(file),
                format,
                crate::market_data::FOUR_HOURS_MS,
                source.gaps,
            )?)
        }
        None => {
            let client = KlineClient::new(FetchConfig {
                gaps: source.gaps,
                ..FetchConfig::default()
            })?;
            Ok(client.fetch_klines(
                &source.symbol,
                crate::market_data::FOUR_HOURS_MS,
                source.start_ms,
                source.end_ms,
            )?)
        }
    }
}

fn load_store(path: &Path) -> Result<EmbeddingStore, PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(load_embeddings(BufReader::new(file))?)
}

/// Optional embedding inputs supplied from files.
#[derive(Debug, Clone, Default)]
pub struct ExternalEmbeddings {
    pub chart: Option<EmbeddingStore>,
    pub news: Option<EmbeddingStore>,
    pub multimodal: Option<EmbeddingStore>,
}

impl ExternalEmbeddings {
    pub fn load(sources: &EmbeddingSources) -> Result<Self, PipelineError> {
        let open = |p: &Option<PathBuf>| p.as_deref().map(load_store).transpose();
        Ok(Self {
            chart: open(&sources.chart)?,
            news: open(&sources.news)?,
            multimodal: open(&sources.multimodal)?,
        })
    }
}

/// Scores and predictions of one trained model.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub model: Ensemble,
    pub test: Metrics,
    pub validation: Option<Metrics>,
    pub test_predictions: Vec<DirectionLabel>,
}

impl CellOutcome {
    fn test_correct<'a>(&'a self, truth: &'a [DirectionLabel]) -> impl Iterator<Item = f64> + 'a {
        self.test_predictions
            .iter()
            .zip(truth)
            .map(|(p, t)| if p == t { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone)]
pub struct BestModel {
    pub choice: ModelChoice,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub table: ResultsTable,
    /// Euclidean-feature accuracy minus random-feature accuracy, when both ran.
    pub bootstrap: Option<BootstrapSummary>,
    pub baseline_model: Ensemble,
    pub best: BestModel,
    pub backtest: BacktestResult,
    pub buy_and_hold: EquityCurve,
}

/// Serializable summary written next to the tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub table: ResultsTable,
    pub bootstrap: Option<BootstrapSummary>,
    pub best_model: ModelChoice,
    pub best_model_final_equity: f64,
    pub buy_and_hold_final_equity: f64,
    pub fitted_checksum: String,
}

/// A prepared experiment: data, split, fitted statistics, embeddings and rankings.
pub struct Experiment {
    config: ExperimentConfig,
    series: CandleSeries,
    labels: Vec<Option<DirectionLabel>>,
    features: FeatureMatrix,
    plan: SplitPlan,
    pool: CandidatePool,
    fitted: FittedState,
    chart: EmbeddingStore,
    multimodal: EmbeddingStore,
    /// Labeled query bars: train, then validation, then test.
    queries: Vec<usize>,
    train_rows: Range<usize>,
    validation_rows: Range<usize>,
    test_rows: Range<usize>,
    rankings: BTreeMap<RankingMethod, Vec<Ranking>>,
}

impl Experiment {
    pub fn prepare(
        series: CandleSeries,
        config: &ExperimentConfig,
        external: ExternalEmbeddings,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let n = series.len();
        let plan = split_dataset(n, &config.split)?;
        let features = assemble_features(&series).stage("features")?;
        let warmup = features.warmup();
        let window = WindowSpec::new(config.window)?;
        let pool_start = warmup + window.len() - 1;
        if plan.candidates.end <= pool_start {
            return Err(PipelineError::Split {
                bars: n,
                reason: format!(
                    "{} candidates do not cover the {} warmup bars",
                    plan.candidates.end, pool_start
                ),
            });
        }
        let labels: Vec<Option<DirectionLabel>> = (0..n)
            .map(|t| compute_label_with(&series, t, config.label_threshold).ok().map(|p| p.label))
            .collect();

        let pool_bars = pool_start..plan.candidates.end;
        let pool = CandidatePool::with_features(
            pool_bars
                .clone()
                .map(|b| (b, features.row_for_bar(b).expect("pool bar has features").clone())),
        );
        let pool_stats = ColumnStats::fit(
            pool_bars
                .clone()
                .map(|b| features.row_for_bar(b).expect("pool bar has features").values.as_slice()),
            features.width(),
        );

        let labeled = |r: &Range<usize>| -> Vec<usize> { r.clone().filter(|&b| labels[b].is_some()).collect() };
        let (train, validation, test) = (labeled(&plan.train), labeled(&plan.validation), labeled(&plan.test));
        if test.is_empty() {
            return Err(PipelineError::Split {
                bars: n,
                reason: "no labeled test bars".into(),
            });
        }
        let train_truth: Vec<DirectionLabel> = train.iter().map(|&b| labels[b].unwrap()).collect();
        let class_weights = if config.balanced_class_weights {
            balanced_class_weights(&train_truth)
        } else {
            config.train.class_weights
        };

        let embed_bars = pool_start..n;
        let chart = match external.chart {
            Some(store) => {
                expect_kind(&store, EmbeddingKind::Chart)?;
                store
            }
            None => {
                let embedder = BaselineChartEmbedder::new(window, pool_stats.clone(), config.seed);
                let mut store = EmbeddingStore::new(EmbeddingKind::Chart);
                for b in embed_bars.clone() {
                    store.insert(embedder.embed(&features, b - warmup)?)?;
                }
                store
            }
        };

        let interval = series.interval_ms();
        let open = |b: usize| series.candles()[b].open_time;
        let (news_per_bar, reducer) = match external.news {
            None => (BTreeMap::new(), None),
            Some(news) => news_by_bar(&news, embed_bars.clone(), &pool_bars, open, interval, config.embeddings.reduce_then_average)
                .stage("news embeddings")?,
        };
        let multimodal = match external.multimodal {
            Some(store) => {
                expect_kind(&store, EmbeddingKind::Multimodal)?;
                store
            }
            None => {
                let mut store = EmbeddingStore::new(EmbeddingKind::Multimodal);
                for b in embed_bars {
                    let c = chart
                        .get(open(b))
                        .ok_or(RetrievalError::MissingEmbedding(open(b)))?;
                    let mut m = combine_multimodal(c, news_per_bar.get(&b))?;
                    m.timestamp = open(b);
                    store.insert(m)?;
                }
                store
            }
        };

        let queries: Vec<usize> = train.iter().chain(&validation).chain(&test).copied().collect();
        let (nt, nv) = (train.len(), validation.len());
        let mut experiment = Self {
            config: config.clone(),
            series,
            labels,
            features,
            plan,
            pool,
            fitted: FittedState {
                pool_stats,
                reducer,
                class_weights,
            },
            chart,
            multimodal,
            train_rows: 0..nt,
            validation_rows: nt..nt + nv,
            test_rows: nt + nv..queries.len(),
            queries,
            rankings: BTreeMap::new(),
        };
        if let Some(path) = &config.rankings_cache {
            if path.exists() {
                experiment.load_rankings(path).stage("ranking cache")?;
            }
        }
        for &method in &config.methods {
            if method.is_distance() && !experiment.rankings.contains_key(&method) {
                let r = experiment.compute_rankings(method).stage("ranking")?;
                experiment.rankings.insert(method, r);
            }
        }
        Ok(experiment)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn series(&self) -> &CandleSeries {
        &self.series
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn plan(&self) -> &SplitPlan {
        &self.plan
    }

    pub fn pool(&self) -> &CandidatePool {
        &self.pool
    }

    pub fn fitted(&self) -> &FittedState {
        &self.fitted
    }

    pub fn chart_embeddings(&self) -> &EmbeddingStore {
        &self.chart
    }

    pub fn multimodal_embeddings(&self) -> &EmbeddingStore {
        &self.multimodal
    }

    pub fn label(&self, bar: usize) -> Option<DirectionLabel> {
        self.labels.get(bar).copied().flatten()
    }

    /// Query bars (train, validation, test) in that order.
    pub fn queries(&self) -> &[usize] {
        &self.queries
    }

    pub fn test_bars(&self) -> &[usize] {
        &self.queries[self.test_rows.clone()]
    }

    pub fn split_sizes(&self) -> SplitSizes {
        SplitSizes {
            bars: self.series.len(),
            candidates: self.plan.candidates.len(),
            pool: self.pool.len(),
            train: self.train_rows.len(),
            validation: self.validation_rows.len(),
            test: self.test_rows.len(),
        }
    }

    /// Cached rankings of a deterministic method, aligned with [`Self::queries`].
    pub fn rankings(&self, method: RankingMethod) -> Option<&[Ranking]> {
        self.rankings.get(&method).map(Vec::as_slice)
    }

    fn top_k(&self) -> usize {
        self.config.k_grid.iter().copied().max().unwrap_or(0)
    }

    fn compute_rankings(&self, method: RankingMethod) -> Result<Vec<Ranking>, PipelineError> {
        let k = self.top_k();
        self.queries
            .iter()
            .map(|&b| {
                let ts = self.series.candles()[b].open_time;
                let ranking = match method {
                    RankingMethod::Euclidean => {
                        let row = self.features.row_for_bar(b).expect("query bar has features");
                        rank_euclidean(b, row, &self.pool, k)?
                    }
                    RankingMethod::ChartEmbedding | RankingMethod::Multimodal => {
                        let store = if method == RankingMethod::Multimodal { &self.multimodal } else { &self.chart };
                        let q = store.get(ts).ok_or(RetrievalError::MissingEmbedding(ts))?;
                        rank_by_embedding(b, q, &self.pool, store, method, k)?
                    }
                    RankingMethod::Random => unreachable!("random rankings are drawn per repetition"),
                };
                Ok(ranking)
            })
            .collect()
    }

    fn random_rankings(&self, repetition: usize) -> Result<Vec<Ranking>, PipelineError> {
        let k = self.top_k();
        let base = self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((repetition as u64) << 32);
        self.queries
            .iter()
            .map(|&b| {
                let ts = self.series.candles()[b].open_time;
                Ok(rank_random(b, ts, &self.pool, k, base ^ b as u64)?)
            })
            .collect()
    }

    /// Replaces rankings with those read from a cache file. Every cached method must
    /// cover exactly the current query bars.
    pub fn load_rankings(&mut self, path: &Path) -> Result<(), PipelineError> {
        let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
        let series = &self.series;
        let all = read_rankings(BufReader::new(file), &self.pool, |ts| series.position(ts))?;
        let mut by_method: BTreeMap<RankingMethod, Vec<Ranking>> = BTreeMap::new();
        for r in all {
            by_method.entry(r.method).or_default().push(r);
        }
        for (method, mut rankings) in by_method {
            if !method.is_distance() {
                continue;
            }
            rankings.sort_by_key(|r| r.query_index);
            let mut expected = self.queries.clone();
            expected.sort_unstable();
            let got: Vec<usize> = rankings.iter().map(|r| r.query_index).collect();
            if got != expected {
                return Err(RetrievalError::Cache(format!("{method} rankings do not match the query bars")).into());
            }
            let position: BTreeMap<usize, Ranking> = rankings.into_iter().map(|r| (r.query_index, r)).collect();
            let mut position = position;
            let aligned = self.queries.iter().map(|b| position.remove(b).expect("checked above")).collect();
            self.rankings.insert(method, aligned);
        }
        Ok(())
    }

    pub fn write_rankings(&self, path: &Path) -> Result<(), PipelineError> {
        let file = File::create(path).map_err(|e| PipelineError::io(path, e))?;
        write_rankings(self.rankings.values().flatten(), BufWriter::new(file))?;
        Ok(())
    }

    fn base_rows(&self) -> Vec<Vec<f64>> {
        self.queries
            .iter()
            .map(|&b| self.features.row_for_bar(b).expect("query bar has features").values.clone())
            .collect()
    }

    fn vote_rows(&self, rankings: &[Ranking], k: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
        self.queries
            .iter()
            .zip(rankings)
            .map(|(&b, r)| {
                let votes = count_votes(r, |i| self.label(i), k)?;
                let mut row = self.features.row_for_bar(b).expect("query bar has features").values.clone();
                row.extend_from_slice(&softmax_normalize(&votes).probs);
                Ok(row)
            })
            .collect()
    }

    /// Feature rows (69 base values plus three votes) for every query bar.
    pub fn feature_rows(&self, method: RankingMethod, k: usize, repetition: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
        match method {
            RankingMethod::Random => self.vote_rows(&self.random_rankings(repetition)?, k),
            m => {
                let rankings = match self.rankings.get(&m) {
                    Some(r) => r,
                    None => &self.compute_rankings(m)?,
                };
                self.vote_rows(rankings, k)
            }
        }
    }

    fn truth(&self, rows: Range<usize>) -> Vec<DirectionLabel> {
        self.queries[rows]
            .iter()
            .map(|&b| self.labels[b].expect("query bars are labeled"))
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.config.train.clone().with_class_weights(self.fitted.class_weights)
    }

    /// Trains on the train rows and scores the validation and test rows.
    pub fn train_and_evaluate(&self, rows: &[Vec<f64>]) -> Result<CellOutcome, PipelineError> {
        let width = rows.first().map_or(0, Vec::len);
        let train: Vec<&[f64]> = rows[self.train_rows.clone()].iter().map(Vec::as_slice).collect();
        let (model, _) = gbt::fit_rows(&train, width, &self.truth(self.train_rows.clone()), &self.train_config())?;
        let predict = |range: Range<usize>| -> Result<Vec<DirectionLabel>, GbtError> {
            rows[range].iter().map(|r| model.predict(r)).collect()
        };
        let test_predictions = predict(self.test_rows.clone())?;
        let test = gbt::evaluate(&test_predictions, &self.truth(self.test_rows.clone()))?;
        let validation = if self.validation_rows.is_empty() {
            None
        } else {
            let p = predict(self.validation_rows.clone())?;
            Some(gbt::evaluate(&p, &self.truth(self.validation_rows.clone()))?)
        };
        Ok(CellOutcome {
            model,
            test,
            validation,
            test_predictions,
        })
    }

    /// Predicts the test bars with a previously trained model.
    pub fn predict_test(&self, model: &Ensemble, choice: ModelChoice) -> Result<Vec<DirectionLabel>, PipelineError> {
        let rows = self.feature_rows(choice.method, choice.k, 0)?;
        Ok(rows[self.test_rows.clone()]
            .iter()
            .map(|r| model.predict(r))
            .collect::<Result<_, _>>()?)
    }

    /// Backtests predictions for the test bars against buy-and-hold over the same bars.
    pub fn backtest(&self, predictions: &[DirectionLabel]) -> Result<(BacktestResult, EquityCurve), PipelineError> {
        let bars = self.test_bars();
        let start = bars[0];
        let result = backtest::simulate(predictions, start, &self.series, &self.config.backtest)?;
        let bench = backtest::buy_and_hold(
            &self.series,
            start,
            start + predictions.len(),
            self.config.backtest.initial_equity,
        )?;
        Ok((result, bench))
    }

    /// Trains the baseline and every (method, K) cell and assembles the report.
    pub fn run(&self) -> Result<ExperimentReport, PipelineError> {
        let cfg = &self.config;
        info!("training the no-feature baseline");
        let baseline = self.train_and_evaluate(&self.base_rows()).stage("baseline")?;
        let test_truth = self.truth(self.test_rows.clone());
        let n_test = test_truth.len();

        let mut methods = Vec::new();
        let mut best: Option<BestModel> = None;
        let mut euclid_correct: Option<Vec<f64>> = None;
        let mut random_correct: Option<Vec<f64>> = None;
        for &method in &cfg.methods {
            let reps = if method == RankingMethod::Random { cfg.random_repetitions } else { 1 };
            let mut test_scores = vec![Vec::with_capacity(reps); cfg.k_grid.len()];
            let mut val_scores = vec![Vec::with_capacity(reps); cfg.k_grid.len()];
            let mut correct = vec![0.0; n_test];
            let mut outcomes: Vec<Option<CellOutcome>> = vec![None; cfg.k_grid.len()];
            for rep in 0..reps {
                for (col, &k) in cfg.k_grid.iter().enumerate() {
                    info!("training {method} K={k} repetition {}/{reps}", rep + 1);
                    let rows = self.feature_rows(method, k, rep).stage("votes")?;
                    let outcome = self.train_and_evaluate(&rows).stage("grid cell")?;
                    test_scores[col].push(CellScore::from(&outcome.test));
                    val_scores[col].push(outcome.validation.as_ref().map(CellScore::from).unwrap_or_default());
                    for (acc, c) in correct.iter_mut().zip(outcome.test_correct(&test_truth)) {
                        *acc += c;
                    }
                    if rep == 0 {
                        outcomes[col] = Some(outcome);
                    }
                }
            }
            let runs = (reps * cfg.k_grid.len()) as f64;
            correct.iter_mut().for_each(|c| *c /= runs);
            match method {
                RankingMethod::Euclidean => euclid_correct = Some(correct),
                RankingMethod::Random => random_correct = Some(correct),
                _ => {}
            }
            let validation: Vec<CellScore> = val_scores.iter().map(|s| CellScore::mean(s)).collect();
            let selected_col = validation
                .iter()
                .enumerate()
                .fold(0, |b, (i, s)| if s.weighted_f1 > validation[b].weighted_f1 { i } else { b });
            let results = MethodResults {
                method,
                test: test_scores.iter().map(|s| CellScore::mean(s)).collect(),
                validation,
                selected_k: cfg.k_grid[selected_col],
            };
            if method == cfg.best_model.method {
                let k = if cfg.select_k_on_validation { results.selected_k } else { cfg.best_model.k };
                let col = cfg.k_grid.iter().position(|&x| x == k).expect("validated K");
                best = Some(BestModel {
                    choice: ModelChoice { method, k },
                    outcome: outcomes[col].take().expect("first repetition recorded"),
                });
            }
            methods.push(results);
        }

        let bootstrap = match (euclid_correct, random_correct) {
            (Some(e), Some(r)) => {
                let diffs: Vec<f64> = e.iter().zip(&r).map(|(a, b)| a - b).collect();
                bootstrap_mean_ci(&diffs, cfg.bootstrap_samples, 0.95, cfg.seed)
            }
            _ => None,
        };
        let best = best.expect("best model method is validated to be run");
        let (backtest, buy_and_hold) = self.backtest(&best.outcome.test_predictions).stage("backtest")?;
        let table = ResultsTable {
            k_grid: cfg.k_grid.clone(),
            baseline: CellScore::from(&baseline.test),
            baseline_validation: baseline.validation.as_ref().map(CellScore::from).unwrap_or_default(),
            methods,
            random_repetitions: cfg.random_repetitions,
            split: self.split_sizes(),
        };
        Ok(ExperimentReport {
            table,
            bootstrap,
            baseline_model: baseline.model,
            best,
            backtest,
            buy_and_hold,
        })
    }
}

fn expect_kind(store: &EmbeddingStore, kind: EmbeddingKind) -> Result<(), EmbeddingError> {
    if store.kind() == kind {
        Ok(())
    } else {
        Err(EmbeddingError::Kind {
            expected: kind,
            got: store.kind(),
        })
    }
}

type NewsByBar = (BTreeMap<usize, EmbeddingVector>, Option<LinearReducer>);

/// Per-bar mean news vector over `(open, open + interval]`, reduced to the chart width.
/// A raw-news reducer is fitted on candidate-pool bars only.
fn news_by_bar(
    news: &EmbeddingStore,
    bars: Range<usize>,
    pool: &Range<usize>,
    open: impl Fn(usize) -> i64,
    interval: i64,
    reduce_then_average: bool,
) -> Result<NewsByBar, PipelineError> {
    let window = |b: usize| (open(b), open(b) + interval);
    match news.kind() {
        EmbeddingKind::NewsReduced => {
            let out = bars
                .filter_map(|b| {
                    let (lo, hi) = window(b);
                    mean_news_embedding(news, lo, hi).map(|v| (b, v))
                })
                .collect();
            Ok((out, None))
        }
        EmbeddingKind::NewsRaw if reduce_then_average => {
            let pool_end = window(pool.end - 1).1;
            let pool_start = window(pool.start).0;
            let fit: Vec<&[f64]> = news
                .range(pool_start, pool_end)
                .map(|v| v.values.as_slice())
                .collect();
            let reducer = LinearReducer::fit_vectors(&fit, CHART_DIM)?;
            let reduced = reducer.reduce_store(news)?;
            let (out, _) = news_by_bar(&reduced, bars, pool, open, interval, false)?;
            Ok((out, Some(reducer)))
        }
        EmbeddingKind::NewsRaw => {
            let raw: BTreeMap<usize, EmbeddingVector> = bars
                .filter_map(|b| {
                    let (lo, hi) = window(b);
                    mean_news_embedding(news, lo, hi).map(|v| (b, v))
                })
                .collect();
            let fit: Vec<&[f64]> = raw
                .range(pool.clone())
                .map(|(_, v)| v.values.as_slice())
                .collect();
            let reducer = LinearReducer::fit_vectors(&fit, CHART_DIM)?;
            let out = raw
                .into_iter()
                .map(|(b, v)| Ok((b, reducer.project(&v)?)))
                .collect::<Result<_, EmbeddingError>>()?;
            Ok((out, Some(reducer)))
        }
        other => Err(EmbeddingError::Kind {
            expected: EmbeddingKind::NewsRaw,
            got: other,
        }
        .into()),
    }
}

/// Loads data and embeddings, prepares, and runs the whole grid.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Experiment, ExperimentReport), PipelineError> {
    let series = load_series(&config.data).stage("load data")?;
    let external = ExternalEmbeddings::load(&config.embeddings).stage("load embeddings")?;
    let experiment = Experiment::prepare(series, config, external)?;
    let report = experiment.run()?;
    Ok((experiment, report))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, PipelineError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| PipelineError::io(&path, e))
}

/// Writes tables, the results summary, model dumps, rankings and backtest CSVs into `dir`.
pub fn write_artifacts(experiment: &Experiment, report: &ExperimentReport, dir: &Path) -> Result<ResultsFile, PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    report.table.write_csv(create(dir, "results.csv")?)?;
    let md = report.table.to_markdown();
    std::fs::write(dir.join("results.md"), &md).map_err(|e| PipelineError::io(&dir.join("results.md"), e))?;
    let summary = ResultsFile {
        table: report.table.clone(),
        bootstrap: report.bootstrap,
        best_model: report.best.choice,
        best_model_final_equity: report.backtest.curve.final_equity(),
        buy_and_hold_final_equity: report.buy_and_hold.final_equity(),
        fitted_checksum: format!("{:016x}", experiment.fitted().checksum()),
    };
    serde_json::to_writer_pretty(create(dir, "results.json")?, &summary)?;
    serde_json::to_writer_pretty(create(dir, "fitted.json")?, experiment.fitted())?;
    report.baseline_model.to_json(create(dir, "baseline_model.json")?)?;
    report.best.outcome.model.to_json(create(dir, "best_model.json")?)?;
    experiment.write_rankings(&dir.join("rankings.csv"))?;
    backtest::write_trades(&report.backtest.trades, create(dir, "trades.csv")?)?;
    backtest::write_equity(&report.backtest.curve, &report.buy_and_hold, create(dir, "equity.csv")?)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_sizes_for_full_dataset() {
        let p = split_dataset(11_812, &SplitConfig::default()).unwrap();
        assert_eq!(p.candidates.len(), 9_449);
        assert_eq!(p.train.len() + p.validation.len() + p.test.len(), 2_363);
        assert_eq!((p.train.len(), p.validation.len(), p.test.len()), (1_890, 236, 237));
    }

    #[test]
    fn split_sizes_for_hundred() {
        let p = split_dataset(100, &SplitConfig::default()).unwrap();
        assert_eq!(
            (p.candidates.len(), p.train.len(), p.validation.len(), p.test.len()),
            (80, 16, 2, 2)
        );
    }

    #[test]
    fn split_too_small() {
        assert!(matches!(split_dataset(5, &SplitConfig::default()), Err(PipelineError::Split { .. })));
    }

    proptest! {
        #[test]
        fn split_is_chronological_and_complete(n in 50usize..20_000) {
            let p = split_dataset(n, &SplitConfig::default()).unwrap();
            prop_assert_eq!(p.candidates.start, 0);
            prop_assert_eq!(p.candidates.end, p.train.start);
            prop_assert_eq!(p.train.end, p.validation.start);
            prop_assert_eq!(p.validation.end, p.test.start);
            prop_assert_eq!(p.test.end, n);
            prop_assert!(p.test.len() >= p.validation.len());
        }
    }
}
