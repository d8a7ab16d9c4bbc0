use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::thread;

use chartvote_core::market_data::{write_candles, Candle, CandleSeries, DataFormat, FOUR_HOURS_MS};

const START: i64 = 1_600_000_000_000 - 1_600_000_000_000 % FOUR_HOURS_MS;

fn candles(n: usize) -> Vec<Candle> {
    let mut close = 10_000.0;
    (0..n)
        .map(|i| {
            let t = i as f64;
            let ret = 0.006 * (t / 7.0).sin() + 0.004 * (t / 2.3).cos() + 0.002 * ((i * 7919) % 13) as f64 / 13.0 - 0.001;
            let open = close;
            close = open * (1.0 + ret);
            let high = open.max(close) * (1.0 + 0.003 + 0.002 * (t / 3.1).sin().abs());
            let low = open.min(close) * (1.0 - 0.003 - 0.002 * (t / 4.7).cos().abs());
            Candle::new(START + i as i64 * FOUR_HOURS_MS, open, high, low, close, 50.0 + 20.0 * (t / 5.0).sin())
        })
        .collect()
}

fn write_data(dir: &Path, n: usize) -> std::path::PathBuf {
    let path = dir.join("candles.csv");
    let series = CandleSeries::four_hour(candles(n)).unwrap();
    write_candles(&series, File::create(&path).unwrap(), DataFormat::Csv).unwrap();
    path
}

fn run(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_chartvote"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn features_writes_matrix_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 200);
    let out_dir = dir.path().join("out");
    let stdout = ok(&run(
        &["features", "--data", data.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()],
        &[],
    ));
    assert!(stdout.contains("161 feature rows x 69 columns and 199 labels"), "{stdout}");
    let features = fs::read_to_string(out_dir.join("features.csv")).unwrap();
    assert_eq!(features.lines().count(), 162);
    assert!(features.starts_with("timestamp,"));
    let labels = fs::read_to_string(out_dir.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().next().unwrap(), "open_time_ms,up,down,label");
    assert_eq!(labels.lines().count(), 200);
}

#[test]
fn rank_train_report_backtest_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 700);
    let out_dir = dir.path().join("out");
    let config = dir.path().join("experiment.toml");
    fs::write(
        &config,
        format!(
            "random_repetitions = 2\nbootstrap_samples = 100\noutput_dir = {:?}\n\n[data]\npath = {:?}\n\n[train]\nrounds = 5\nmax_depth = 3\n",
            out_dir.to_str().unwrap(),
            data.to_str().unwrap()
        ),
    )
    .unwrap();
    let cfg = config.to_str().unwrap();

    let stdout = ok(&run(&["--config", cfg, "rank"], &[]));
    assert!(stdout.contains("rankings for"), "{stdout}");
    let cache = out_dir.join("rankings.csv");
    let header = fs::read_to_string(&cache).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "query_timestamp,method,rank,candidate_timestamp,score"
    );
    assert!(out_dir.join("chart_embeddings.txt").is_file());

    let trained = ok(&run(&["--config", cfg, "--rankings-cache", cache.to_str().unwrap(), "train"], &[]));
    assert!(trained.contains("| Method"), "{trained}");
    assert!(trained.contains("Euclidean minus random accuracy"));
    for f in ["results.csv", "results.md", "results.json", "best_model.json", "trades.csv", "equity.csv"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }

    let md = ok(&run(&["--config", cfg, "report"], &[]));
    assert_eq!(md, trained);
    let csv = ok(&run(&["--config", cfg, "report", "--format", "csv"], &[]));
    assert!(csv.starts_with("method,k,accuracy,weighted_f1"));
    assert_eq!(csv.lines().count(), 1 + 1 + 4 * 7);

    let equity_before = fs::read_to_string(out_dir.join("equity.csv")).unwrap();
    let bt = ok(&run(&["--config", cfg, "backtest"], &[]));
    assert!(bt.contains("multimodal K=5"), "{bt}");
    assert_eq!(fs::read_to_string(out_dir.join("equity.csv")).unwrap(), equity_before);
}

#[test]
fn fetch_uses_api_base_override() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let bars = candles(30);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).unwrap() == 0 || h == "\r\n" {
                    break;
                }
            }
            let rows: Vec<String> = bars
                .iter()
                .map(|c| {
                    format!(
                        "[{},\"{}\",\"{}\",\"{}\",\"{}\",\"{}\",{},\"0\",1,\"0\",\"0\",\"0\"]",
                        c.open_time, c.open, c.high, c.low, c.close, c.volume, c.open_time + FOUR_HOURS_MS - 1
                    )
                })
                .collect();
            let body = format!("[{}]", rows.join(","));
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("btc.json");
    let end = (START + 30 * FOUR_HOURS_MS).to_string();
    let stdout = ok(&run(
        &["fetch", "--start", &START.to_string(), "--end", &end, "--out", out.to_str().unwrap()],
        &[("CHARTVOTE_API_BASE", &base)],
    ));
    assert!(stdout.starts_with("30 bars"), "{stdout}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 30);
}

#[test]
fn invalid_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "k_grid = [7]\n").unwrap();
    let out = run(&["--config", config.to_str().unwrap(), "features"], &[]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("K = 7"), "{stderr}");
}
