use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chartvote_core::backtest::{write_equity, write_trades};
use chartvote_core::gbt::Ensemble;
use chartvote_core::market_data::{
    label_all, label_distribution, write_candles, write_labels, DataFormat, FetchConfig, GapPolicy,
    KlineClient, FOUR_HOURS_MS,
};
use chartvote_core::pipeline::{
    load_series, write_artifacts, Experiment, ExperimentConfig, ExternalEmbeddings, ModelChoice,
    ResultsFile,
};
use chartvote_core::retrieval::RankingMethod;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

/// Retrieval-augmented direction forecasting on 4h candles.
#[derive(Parser)]
#[command(name = "chartvote", version)]
struct Cli {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Candle file (csv or json) instead of fetching.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    gaps: Option<Gaps>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    random_repetitions: Option<usize>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Comma-separated subset of euclidean, chart_embedding, multimodal, random.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<RankingMethod>>,
    #[arg(long, global = true)]
    best_method: Option<RankingMethod>,
    #[arg(long, global = true)]
    best_k: Option<usize>,
    #[arg(long, global = true)]
    select_k_on_validation: bool,
    #[arg(long, global = true)]
    rankings_cache: Option<PathBuf>,
    #[arg(long, global = true)]
    news: Option<PathBuf>,
    #[arg(long, global = true)]
    chart_embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gaps {
    Error,
    ForwardFill,
    Keep,
}

impl From<Gaps> for GapPolicy {
    fn from(g: Gaps) -> Self {
        match g {
            Gaps::Error => GapPolicy::Error,
            Gaps::ForwardFill => GapPolicy::ForwardFill,
            Gaps::Keep => GapPolicy::Keep,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Download klines into a candle file.
    Fetch {
        /// Defaults to the configured symbol.
        #[arg(long)]
        symbol: Option<String>,
        /// Inclusive start, epoch ms.
        #[arg(long)]
        start: Option<i64>,
        /// Exclusive end, epoch ms.
        #[arg(long)]
        end: Option<i64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write the feature matrix and labels as CSV.
    Features,
    /// Compute rankings for the distance methods and write the cache and embeddings.
    Rank,
    /// Train and evaluate the full grid, writing tables, models and backtest files.
    Train,
    /// Backtest a saved model on the test split.
    Backtest {
        /// Model JSON; defaults to `<output_dir>/best_model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Render a results summary written by `train`.
    Report {
        /// Defaults to `<output_dir>/results.json`.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: ReportFormat,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(p) = &o.data {
        config.data.path = Some(p.clone());
    }
    if let Some(g) = o.gaps {
        config.data.gaps = g.into();
    }
    if let Some(d) = &o.output_dir {
        config.output_dir = d.clone();
    }
    if let Some(s) = o.seed {
        config.seed = s;
        config.train.seed = s;
    }
    if let Some(r) = o.random_repetitions {
        config.random_repetitions = r;
    }
    if let Some(r) = o.rounds {
        config.train.rounds = r;
    }
    if let Some(m) = &o.methods {
        config.methods = m.clone();
    }
    if let Some(m) = o.best_method {
        config.best_model.method = m;
    }
    if let Some(k) = o.best_k {
        config.best_model.k = k;
    }
    if o.select_k_on_validation {
        config.select_k_on_validation = true;
    }
    if let Some(p) = &o.rankings_cache {
        config.rankings_cache = Some(p.clone());
    }
    if let Some(p) = &o.news {
        config.embeddings.news = Some(p.clone());
    }
    if let Some(p) = &o.chart_embeddings {
        config.embeddings.chart = Some(p.clone());
    }
    config.validate()?;
    Ok(config)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn prepare(config: &ExperimentConfig) -> Result<Experiment> {
    let series = load_series(&config.data).context("loading candles")?;
    info!("loaded {} bars", series.len());
    let external = ExternalEmbeddings::load(&config.embeddings).context("loading embeddings")?;
    Ok(Experiment::prepare(series, config, external)?)
}

fn fetch(config: &ExperimentConfig, symbol: Option<String>, start: Option<i64>, end: Option<i64>, out: &Path) -> Result<()> {
    let format = match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => ext.parse::<DataFormat>().map_err(anyhow::Error::msg)?,
        None => DataFormat::Csv,
    };
    let client = KlineClient::new(FetchConfig {
        gaps: config.data.gaps,
        ..FetchConfig::default()
    })?;
    let symbol = symbol.unwrap_or_else(|| config.data.symbol.clone());
    let series = client.fetch_klines(
        &symbol,
        FOUR_HOURS_MS,
        start.unwrap_or(config.data.start_ms),
        end.unwrap_or(config.data.end_ms),
    )?;
    write_candles(&series, create(out)?, format)?;
    let dist = label_distribution(&label_all(&series, config.label_threshold))?;
    println!(
        "{} bars -> {} (c0 {:.2}%, c1 {:.2}%, c2 {:.2}%)",
        series.len(),
        out.display(),
        dist.long * 100.0,
        dist.short * 100.0,
        dist.hold * 100.0
    );
    Ok(())
}

fn features(config: &ExperimentConfig) -> Result<()> {
    let series = load_series(&config.data)?;
    let matrix = chartvote_core::indicators::assemble_features(&series)?;
    let points = label_all(&series, config.label_threshold);
    let dir = &config.output_dir;
    matrix.write_csv(create(&dir.join("features.csv"))?)?;
    write_labels(&series, &points, create(&dir.join("labels.csv"))?)?;
    println!(
        "{} feature rows x {} columns and {} labels -> {}",
        matrix.len(),
        matrix.width(),
        points.len(),
        dir.display()
    );
    Ok(())
}

fn rank(config: &ExperimentConfig) -> Result<()> {
    let exp = prepare(config)?;
    let dir = &config.output_dir;
    let cache = config.rankings_cache.clone().unwrap_or_else(|| dir.join("rankings.csv"));
    if let Some(parent) = cache.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    exp.write_rankings(&cache)?;
    exp.chart_embeddings().write(create(&dir.join("chart_embeddings.txt"))?)?;
    exp.multimodal_embeddings().write(create(&dir.join("multimodal_embeddings.txt"))?)?;
    println!("rankings for {} query bars -> {}", exp.queries().len(), cache.display());
    Ok(())
}

fn train(config: &ExperimentConfig) -> Result<()> {
    let exp = prepare(config)?;
    let report = exp.run()?;
    let summary = write_artifacts(&exp, &report, &config.output_dir)?;
    print!("{}", report.table.to_markdown());
    print_summary(&summary);
    Ok(())
}

fn backtest(config: &ExperimentConfig, model: Option<PathBuf>) -> Result<()> {
    let path = model.unwrap_or_else(|| config.output_dir.join("best_model.json"));
    let file = File::open(&path).with_context(|| format!("opening model {}", path.display()))?;
    let model = Ensemble::from_json(BufReader::new(file))?;
    let exp = prepare(config)?;
    let choice = config.best_model;
    if model.num_features != exp.features().width() + 3 {
        bail!(
            "model expects {} features, vote-augmented rows have {}",
            model.num_features,
            exp.features().width() + 3
        );
    }
    let predictions = exp.predict_test(&model, choice)?;
    let (result, bench) = exp.backtest(&predictions)?;
    let dir = &config.output_dir;
    write_trades(&result.trades, create(&dir.join("trades.csv"))?)?;
    write_equity(&result.curve, &bench, create(&dir.join("equity.csv"))?)?;
    println!(
        "{} K={}: {} trades, final equity {:.4} vs buy-and-hold {:.4}",
        choice.method,
        choice.k,
        result.trades.len(),
        result.curve.final_equity(),
        bench.final_equity()
    );
    Ok(())
}

fn print_summary(summary: &ResultsFile) {
    if let Some(b) = summary.bootstrap {
        println!(
            "Euclidean minus random accuracy: {:+.2} pp ({:.0}% CI [{:+.2}, {:+.2}], {} resamples)",
            b.margin * 100.0,
            b.confidence * 100.0,
            b.ci_low * 100.0,
            b.ci_high * 100.0,
            b.samples
        );
    }
    let ModelChoice { method, k } = summary.best_model;
    println!(
        "Backtest of {method} K={k}: final equity {:.4} vs buy-and-hold {:.4}",
        summary.best_model_final_equity, summary.buy_and_hold_final_equity
    );
}

fn report(config: &ExperimentConfig, results: Option<PathBuf>, format: ReportFormat) -> Result<()> {
    let path = results.unwrap_or_else(|| config.output_dir.join("results.json"));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let summary: ResultsFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    match format {
        ReportFormat::Markdown => {
            print!("{}", summary.table.to_markdown());
            print_summary(&summary);
        }
        ReportFormat::Csv => summary.table.write_csv(std::io::stdout().lock())?,
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    match cli.command {
        Command::Fetch { symbol, start, end, out } => fetch(&config, symbol, start, end, &out),
        Command::Features => features(&config),
        Command::Rank => rank(&config),
        Command::Train => train(&config),
        Command::Backtest { model } => backtest(&config, model),
        Command::Report { results, format } => report(&config, results, format),
    }
}
