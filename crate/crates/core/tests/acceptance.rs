//! Acceptance suite. Prints one PASS / FAIL / BLOCKED line per criterion and exits
//! non-zero when any criterion fails. Criteria that need the live exchange run only
//! with `CHARTVOTE_ONLINE=1`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use chartvote_core::backtest::{buy_and_hold, simulate, BacktestConfig};
use chartvote_core::embeddings::{
    EmbeddingKind, EmbeddingStore, EmbeddingVector, CHART_DIM, NEWS_RAW_DIM,
};
use chartvote_core::gbt::{evaluate, fit_rows, TrainConfig};
use chartvote_core::indicators::FeatureVector;
use chartvote_core::market_data::{
    compute_label, label_all, label_distribution, Candle, CandleSeries, DirectionLabel, FetchConfig, GapPolicy,
    KlineClient, FOUR_HOURS_MS,
};
use chartvote_core::pipeline::{
    split_dataset, DataSource, Experiment, ExperimentConfig, ExternalEmbeddings, SplitConfig, DEFAULT_END_MS,
    DEFAULT_START_MS,
};
use chartvote_core::retrieval::{rank_by_embedding, rank_euclidean, CandidatePool, RankingMethod};
use chartvote_core::votes::{softmax_normalize, VoteVector};
use common::{regime_series, START_MS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use DirectionLabel::{Hold, Long, Short};

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn online() -> bool {
    std::env::var("CHARTVOTE_ONLINE").is_ok_and(|v| v == "1")
}

fn label_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut agree, mut ties) = (0, 0);
    let total = 10_000;
    for i in 0..total {
        let close = rng.random_range(100.0..50_000.0);
        let (up, down) = if i % 10 == 0 {
            // both thresholds crossed, or exactly on a threshold
            let up = if i % 20 == 0 { 0.0075 } else { rng.random_range(0.0075..0.05) };
            (up, -rng.random_range(0.0075..0.05))
        } else {
            (rng.random_range(-0.01..0.02), -rng.random_range(0.0..0.02))
        };
        let high: f64 = close * (1.0 + up);
        let low = (close * (1.0 + down)).min(high);
        let next_open = low + (high - low) * 0.5;
        let series = CandleSeries::four_hour(vec![
            Candle::new(0, close, close, close, close, 1.0),
            Candle::new(FOUR_HOURS_MS, next_open, high, low, next_open, 1.0),
        ])
        .unwrap();
        let u = (high - close) / close;
        let v = (low - close) / close;
        let expected = if u >= 0.0075 {
            Long
        } else if v <= -0.0075 {
            Short
        } else {
            Hold
        };
        if u >= 0.0075 && v <= -0.0075 {
            ties += 1;
        }
        if compute_label(&series, 0).unwrap().label == expected {
            agree += 1;
        }
    }
    let elapsed = started.elapsed();
    check(
        agree == total && ties > 0 && elapsed < Duration::from_secs(1),
        format!("{agree}/{total} agree, {ties} double-crossing cases, {elapsed:.2?}"),
    )
}

fn dataset_reproduction() -> Outcome {
    let plan = split_dataset(11_812, &SplitConfig::default()).unwrap();
    let offline = format!(
        "offline split of 11,812 bars = {}/{}",
        plan.candidates.len(),
        plan.train.len() + plan.validation.len() + plan.test.len()
    );
    if !online() {
        return Outcome::Blocked(format!(
            "needs the live exchange (set CHARTVOTE_ONLINE=1); {offline}"
        ));
    }
    let client = KlineClient::new(FetchConfig {
        gaps: GapPolicy::Keep,
        ..FetchConfig::default()
    })
    .unwrap();
    let series = match client.fetch_klines("BTCUSDT", FOUR_HOURS_MS, DEFAULT_START_MS, DEFAULT_END_MS) {
        Ok(s) => s,
        Err(e) => return Outcome::Blocked(format!("fetch failed: {e}; {offline}")),
    };
    let n = series.len();
    let dist = label_distribution(&label_all(&series, 0.0075)).unwrap();
    let target = [0.4811, 0.2940, 0.2249];
    let got = [dist.long, dist.short, dist.hold];
    let labels_ok = got.iter().zip(target).all(|(g, t)| (g - t).abs() <= 0.005);
    let count_ok = n.abs_diff(11_812) <= 12;
    let split = split_dataset(n, &SplitConfig::default()).unwrap();
    let split_ok = n != 11_812 || (split.candidates.len() == 9_449 && n - split.candidates.len() == 2_363);
    check(
        count_ok && labels_ok && split_ok,
        format!(
            "{n} bars, labels {:.2}/{:.2}/{:.2}%, split {}/{}",
            got[0] * 100.0,
            got[1] * 100.0,
            got[2] * 100.0,
            split.candidates.len(),
            n - split.candidates.len()
        ),
    )
}

fn ranking_exactness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n_cand, n_query, k) = (1_000usize, 200usize, 30usize);
    // small integer grids make distance ties common
    let grid = |rng: &mut ChaCha8Rng, dim: usize| -> Vec<f64> { (0..dim).map(|_| rng.random_range(0..3) as f64).collect() };
    let feats: Vec<Vec<f64>> = (0..n_cand).map(|_| grid(&mut rng, 8)).collect();
    let embeds: Vec<Vec<f64>> = (0..n_cand).map(|_| grid(&mut rng, CHART_DIM)).collect();
    let ts_of = |i: usize| i as i64 * 10;
    let pool = CandidatePool::with_features(
        feats.iter().enumerate().map(|(i, v)| (i, FeatureVector { timestamp: ts_of(i), values: v.clone() })),
    );
    let mut store = EmbeddingStore::new(EmbeddingKind::Chart);
    for (i, v) in embeds.iter().enumerate() {
        store.insert(EmbeddingVector::new(ts_of(i), v.clone())).unwrap();
    }
    let oracle = |cands: &[Vec<f64>], query: &[f64], ts: i64, score: &dyn Fn(&[f64], &[f64]) -> f64| {
        let mut all: Vec<(f64, i64, usize)> = (0..n_cand)
            .filter(|&i| ts_of(i) < ts)
            .map(|i| (score(&cands[i], query), ts_of(i), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    };
    let euclid = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let cosine = |c: &[f64], q: &[f64]| {
        let dot: f64 = q.iter().zip(c).map(|(x, y)| x * y).sum();
        let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nc = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nq == 0.0 || nc == 0.0 { 1.0 } else { (1.0 - dot / (nq * nc)).clamp(0.0, 2.0) }
    };
    let (mut mismatches, mut ties) = (0, 0);
    for q in 0..n_query {
        let ts = rng.random_range(1..n_cand as i64 * 10 + 50);
        let fq = grid(&mut rng, 8);
        let eq = grid(&mut rng, CHART_DIM);
        let want_e = oracle(&feats, &fq, ts, &euclid);
        let want_c = oracle(&embeds, &eq, ts, &cosine);
        ties += want_e.windows(2).filter(|w| w[0].0 == w[1].0).count();
        let e = rank_euclidean(q, &FeatureVector { timestamp: ts, values: fq }, &pool, k).unwrap();
        let c = rank_by_embedding(q, &EmbeddingVector::new(ts, eq), &pool, &store, RankingMethod::ChartEmbedding, k)
            .unwrap();
        for (got, want) in [(e.neighbors, want_e), (c.neighbors, want_c)] {
            let same = got.len() == want.len()
                && got.iter().zip(&want).all(|(g, w)| g.index == w.2 && g.score == w.0);
            mismatches += usize::from(!same);
        }
    }
    let elapsed = started.elapsed();
    check(
        mismatches == 0 && ties > 0 && elapsed < Duration::from_secs(10),
        format!(
            "{mismatches} mismatching rankings over {n_query} queries x {n_cand} candidates x 2 methods \
             ({ties} tied neighbor pairs), {elapsed:.2?}"
        ),
    )
}

fn vote_softmax() -> Outcome {
    let p = softmax_normalize(&VoteVector { k: 10, counts: [6, 3, 1] }).probs;
    let expected = [0.946500, 0.047123, 0.006377];
    let example_ok = p.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1_000 {
        let c: [u32; 3] = std::array::from_fn(|_| rng.random_range(0..=30));
        let s = rng.random_range(1..=30);
        let a = softmax_normalize(&VoteVector { k: 30, counts: c }).probs;
        let b = softmax_normalize(&VoteVector { k: 30, counts: c.map(|x| x + s) }).probs;
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    check(
        example_ok && worst <= 1e-12,
        format!("(6,3,1) -> ({:.7}, {:.7}, {:.7}); max shift deviation {worst:.1e}", p[0], p[1], p[2]),
    )
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1_000 {
        let n = rng.random_range(1..200);
        let draw = |rng: &mut ChaCha8Rng| [Long, Short, Hold][rng.random_range(0..3)];
        let truth: Vec<DirectionLabel> = (0..n).map(|_| draw(&mut rng)).collect();
        let pred: Vec<DirectionLabel> = (0..n).map(|_| draw(&mut rng)).collect();
        let mut cm = [[0f64; 3]; 3];
        for (t, p) in truth.iter().zip(&pred) {
            cm[*t as usize][*p as usize] += 1.0;
        }
        let acc = (0..3).map(|i| cm[i][i]).sum::<f64>() / n as f64;
        let mut wf1 = 0.0;
        for c in 0..3 {
            let support: f64 = cm[c].iter().sum();
            let predicted: f64 = (0..3).map(|r| cm[r][c]).sum();
            let tp = cm[c][c];
            let f1 = if support + predicted == 0.0 { 0.0 } else { 2.0 * tp / (support + predicted) };
            wf1 += support / n as f64 * f1;
        }
        let m = evaluate(&pred, &truth).unwrap();
        worst = worst.max((m.accuracy - acc).abs()).max((m.weighted_f1 - wf1).abs());
    }
    check(worst <= 1e-12, format!("max deviation {worst:.1e} over 1,000 random label sets"))
}

fn gbt_sanity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    // separable: class decided by which third of [0, 3) the first feature falls in
    let toy: Vec<[f64; 2]> = (0..300).map(|i| [(i % 3) as f64 + rng.random_range(0.05..0.95), rng.random_range(-1.0..1.0)]).collect();
    let toy_y: Vec<DirectionLabel> = toy.iter().map(|r| DirectionLabel::from_class_index(r[0] as usize).unwrap()).collect();
    let rows: Vec<&[f64]> = toy.iter().map(|r| r.as_slice()).collect();
    let cfg = TrainConfig { rounds: 50, ..TrainConfig::default() };
    let (model, _) = fit_rows(&rows, 2, &toy_y, &cfg).unwrap();
    let toy_acc = rows.iter().zip(&toy_y).filter(|(r, y)| model.predict(r).unwrap() == **y).count() as f64 / 300.0;

    // noisy 2,000-row set for the loss trajectory and determinism
    let width = 10;
    let data: Vec<Vec<f64>> = (0..2_000).map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y: Vec<DirectionLabel> = data
        .iter()
        .map(|r| {
            let s = r[0] + 0.5 * r[1] * r[2] + rng.random_range(-0.5..0.5);
            if s > 0.3 { Long } else if s < -0.3 { Short } else { Hold }
        })
        .collect();
    let rows: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
    let cfg = TrainConfig::default().with_class_weights(chartvote_core::gbt::balanced_class_weights(&y));
    let (a, history) = fit_rows(&rows, width, &y, &cfg).unwrap();
    let (b, _) = fit_rows(&rows, width, &y, &cfg).unwrap();
    let holdout: Vec<Vec<f64>> = (0..500).map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let deterministic = holdout.iter().all(|r| {
        let (pa, pb) = (a.predict_proba(r).unwrap(), b.predict_proba(r).unwrap());
        pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let increases = history.log_loss.windows(2).filter(|w| w[1] > w[0]).count();
    let elapsed = started.elapsed();
    check(
        toy_acc == 1.0 && deterministic && increases == 0 && history.log_loss.len() == 201 && elapsed < Duration::from_secs(60),
        format!(
            "toy accuracy {toy_acc}, bitwise refit {deterministic}, log-loss {:.4} -> {:.4} with {increases} increases, {elapsed:.2?}",
            history.log_loss[0],
            history.log_loss[200]
        ),
    )
}

fn backtest_ledger() -> Outcome {
    let cfg = BacktestConfig::default();
    let scenario = |low: f64| {
        let s = CandleSeries::four_hour(vec![
            Candle::new(0, 100.0, 100.0, 100.0, 100.0, 1.0),
            Candle::new(FOUR_HOURS_MS, 100.0, 101.5, low, 101.0, 1.0),
        ])
        .unwrap();
        simulate(&[Long], 0, &s, &cfg).unwrap().trades[0].net_return
    };
    let (stopped, clean) = (scenario(99.0), scenario(99.5));
    let series = regime_series(400, 9);
    let flat = simulate(&[Hold; 399], 0, &series, &cfg).unwrap();
    let flat_ok = flat.curve.equity.iter().all(|&e| e == cfg.initial_equity) && flat.curve.equity.len() == 400;

    // long every bar without fees on a path whose lows never reach the stop
    let candles: Vec<Candle> = series
        .candles()
        .iter()
        .scan(None::<f64>, |prev, c| {
            let low = prev.map_or(c.low, |p: f64| c.low.max(p * 0.995));
            let c = Candle::new(c.open_time, c.open.max(low), c.high.max(low), low, c.close.max(low), c.volume);
            *prev = Some(c.close);
            Some(c)
        })
        .collect();
    let calm = CandleSeries::four_hour(candles).unwrap();
    let no_fee = BacktestConfig { commission: 0.0, ..cfg };
    let long = simulate(&[Long; 399], 0, &calm, &no_fee).unwrap();
    let bh = buy_and_hold(&calm, 0, 399, 1.0).unwrap();
    let worst = long.curve.equity.iter().zip(&bh.equity).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(
        (stopped - (-0.0083)).abs() < 1e-15 && (clean - 0.0092).abs() < 1e-15 && flat_ok && worst <= 1e-12,
        format!("stopped {stopped:.6}, clean {clean:.6}, flat curve {flat_ok}, buy-and-hold gap {worst:.1e}"),
    )
}

fn news_store(n_bars: usize) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = EmbeddingStore::new(EmbeddingKind::NewsRaw);
    for b in 0..n_bars {
        let ts = START_MS + b as i64 * FOUR_HOURS_MS + 1_800_000;
        store
            .insert(EmbeddingVector::new(ts, (0..NEWS_RAW_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .unwrap();
    }
    store
}

fn leakage_guard() -> Outcome {
    let n = 700;
    let series = regime_series(n, 12);
    let mut config = ExperimentConfig::default();
    config.methods = vec![RankingMethod::Multimodal];
    let plan = split_dataset(n, &config.split).unwrap();
    let prepare = |s: CandleSeries, news: Option<EmbeddingStore>| {
        Experiment::prepare(s, &config, ExternalEmbeddings { news, ..Default::default() }).unwrap()
    };
    let news = news_store(n);
    let reference = prepare(series.clone(), Some(news.clone())).fitted().checksum();
    let plain_reference = prepare(series.clone(), None).fitted().checksum();
    let mut changed = 0;
    let mut checked = 0;
    for row in plan.test.clone() {
        let perturbed = series.map_from(row, |c| {
            c.high *= 1.2;
            c.close *= 1.1;
            c.volume *= 4.0;
        });
        let perturbed = CandleSeries::four_hour(
            perturbed
                .candles()
                .iter()
                .enumerate()
                .map(|(i, c)| if i == row { *c } else { series.candles()[i] })
                .collect(),
        )
        .unwrap();
        checked += 1;
        changed += usize::from(prepare(perturbed, None).fitted().checksum() != plain_reference);
    }
    let test_start = series.candles()[plan.test.start].open_time;
    let mut shifted_news = EmbeddingStore::new(EmbeddingKind::NewsRaw);
    for v in news.iter() {
        let mut v = v.clone();
        if v.timestamp >= test_start {
            v.values.iter_mut().for_each(|x| *x += 3.0);
        }
        shifted_news.insert(v).unwrap();
    }
    let whole = series.map_from(plan.test.start, |c| {
        c.open *= 2.0;
        c.high *= 2.0;
        c.low *= 2.0;
        c.close *= 2.0;
    });
    checked += 1;
    changed += usize::from(prepare(whole, Some(shifted_news)).fitted().checksum() != reference);
    check(
        changed == 0,
        format!("{changed} of {checked} test-split perturbations changed the fitted checksum"),
    )
}

fn results_table_properties() -> Outcome {
    let started = Instant::now();
    let mut config = ExperimentConfig {
        random_repetitions: 20,
        bootstrap_samples: 2_000,
        ..ExperimentConfig::default()
    };
    config.train.rounds = 30;
    config.train.max_depth = 4;
    let exp = Experiment::prepare(regime_series(4_000, 21), &config, ExternalEmbeddings::default()).unwrap();
    let report = exp.run().unwrap();
    let shape_ok = report.table.methods.len() == 4 && report.table.methods.iter().all(|m| m.test.len() == 6);
    let e = report.table.method(RankingMethod::Euclidean).unwrap().average().accuracy;
    let r = report.table.method(RankingMethod::Random).unwrap().average().accuracy;
    let b = report.bootstrap.expect("euclidean and random both ran");
    let synthetic = format!(
        "synthetic substitute (4,000 regime bars, 30 rounds, 20 random runs): grid complete {shape_ok}; \
         euclidean {:.2}% vs random {:.2}%, margin {:+.2} pp, 95% CI [{:+.2}, {:+.2}] pp, {:.1?}",
        e * 100.0,
        r * 100.0,
        b.margin * 100.0,
        b.ci_low * 100.0,
        b.ci_high * 100.0,
        started.elapsed()
    );
    if !shape_ok {
        return Outcome::Fail(synthetic);
    }
    if !online() {
        return Outcome::Blocked(format!("real dataset needs the live exchange (set CHARTVOTE_ONLINE=1); {synthetic}"));
    }
    let config = ExperimentConfig {
        data: DataSource {
            gaps: GapPolicy::Keep,
            ..DataSource::default()
        },
        ..ExperimentConfig::default()
    };
    match chartvote_core::pipeline::run_experiment(&config) {
        Err(e) => Outcome::Blocked(format!("real-data run failed: {e}; {synthetic}")),
        Ok((_, report)) => {
            let complete = report.table.methods.len() == 4 && report.table.methods.iter().all(|m| m.test.len() == 6);
            let b = report.bootstrap.expect("euclidean and random both ran");
            check(
                complete && b.margin > 0.0,
                format!(
                    "real data: margin {:+.2} pp, 95% CI [{:+.2}, {:+.2}] pp; {synthetic}",
                    b.margin * 100.0,
                    b.ci_low * 100.0,
                    b.ci_high * 100.0
                ),
            )
        }
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("label-rule oracle", label_oracle),
        ("dataset reproduction", dataset_reproduction),
        ("ranking exactness", ranking_exactness),
        ("vote softmax", vote_softmax),
        ("metrics oracle", metrics_oracle),
        ("gbt sanity", gbt_sanity),
        ("backtest ledger", backtest_ledger),
        ("leakage guard", leakage_guard),
        ("results-table properties", results_table_properties),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Blocked(d) => ("BLOCKED", d),
        };
        println!("[{tag}] {name}: {detail}");
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
