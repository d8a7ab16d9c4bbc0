//! Paginated REST client for exchange kline (candlestick) history.
//!
//! Requests `GET {base}/api/v3/klines?symbol&interval&startTime&endTime&limit` and
//! consumes only the first six fields of each row
//! (`open_time, open, high, low, close, volume`).

use std::collections::BTreeMap;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, warn};
use serde_json::Value;

use super::{Candle, CandleSeries, GapPolicy, MarketDataError};

pub const DEFAULT_API_BASE: &str = "https://api.binance.com";
/// Environment variable that overrides the API base URL.
pub const API_BASE_ENV: &str = "CHARTVOTE_API_BASE";
/// Exchange cap on rows per kline request.
pub const MAX_LIMIT: usize = 1000;

#[derive(Debug, Clone)]
pub struct FetchConfig {
    pub base_url: String,
    pub limit: usize,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    pub timeout: Duration,
    pub gaps: GapPolicy,
    /// Wall clock override (epoch ms) used to detect the still-open final bar.
    pub now_ms: Option<i64>,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self {
            base_url: std::env::var(API_BASE_ENV).unwrap_or_else(|_| DEFAULT_API_BASE.to_string()),
            limit: MAX_LIMIT,
            max_retries: 5,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(16),
            timeout: Duration::from_secs(30),
            gaps: GapPolicy::Error,
            now_ms: None,
        }
    }
}

pub struct KlineClient {
    http: reqwest::blocking::Client,
    config: FetchConfig,
}

impl KlineClient {
    pub fn new(config: FetchConfig) -> Result<Self, MarketDataError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| MarketDataError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self { http, config })
    }

    pub fn config(&self) -> &FetchConfig {
        &self.config
    }

    /// Fetches every closed bar with `start <= open_time < end`.
    pub fn fetch_klines(
        &self,
        symbol: &str,
        interval_ms: i64,
        start: i64,
        end: i64,
    ) -> Result<CandleSeries, MarketDataError> {
        if start >= end {
            return Err(MarketDataError::InvalidRequest(format!(
                "start ({start}) must be before end ({end})"
            )));
        }
        let interval = interval_code(interval_ms)?;
        let limit = self.config.limit.clamp(1, MAX_LIMIT);
        let now = self.config.now_ms.unwrap_or_else(now_ms);

        let mut bars: BTreeMap<i64, Candle> = BTreeMap::new();
        let mut cursor = start;
        while cursor < end {
            let url = format!(
                "{}/api/v3/klines?symbol={symbol}&interval={interval}&startTime={cursor}&endTime={}&limit={limit}",
                self.config.base_url.trim_end_matches('/'),
                end - 1
            );
            let rows = self.get_rows(&url)?;
            debug!("fetched {} rows from {cursor}", rows.len());
            if rows.is_empty() {
                break;
            }
            let mut last_open = cursor;
            for (i, row) in rows.iter().enumerate() {
                let candle = parse_kline_row(row, interval_ms).map_err(|message| {
                    MarketDataError::Parse { row: i + 1, message }
                })?;
                last_open = last_open.max(candle.open_time);
                if candle.open_time < start || candle.open_time >= end {
                    continue;
                }
                if candle.open_time + interval_ms > now {
                    // still open
                    continue;
                }
                bars.entry(candle.open_time).or_insert(candle);
            }
            let next = last_open + interval_ms;
            if rows.len() < limit || next <= cursor {
                break;
            }
            cursor = next;
        }
        CandleSeries::with_gap_policy(bars.into_values().collect(), interval_ms, self.config.gaps)
    }

    fn get_rows(&self, url: &str) -> Result<Vec<Value>, MarketDataError> {
        let mut backoff = self.config.initial_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let retry_after = match self.http.get(url).send() {
                Ok(resp) => {
                    let status = resp.status();
                    let header_wait = resp
                        .headers()
                        .get("retry-after")
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.parse::<u64>().ok())
                        .map(Duration::from_secs);
                    let body = resp.text().map_err(|e| MarketDataError::Transport {
                        attempts,
                        message: e.to_string(),
                    })?;
                    if status.is_success() {
                        return decode_body(&body);
                    }
                    if status.as_u16() == 429 || status.as_u16() == 418 || status.is_server_error() {
                        warn!("kline request returned {status}, retrying");
                        (format!("HTTP {status}"), header_wait)
                    } else {
                        return Err(remote_error(&body).unwrap_or(MarketDataError::Remote {
                            code: status.as_u16() as i64,
                            message: body,
                        }));
                    }
                }
                Err(e) => {
                    warn!("kline request failed: {e}");
                    (e.to_string(), None)
                }
            };
            if attempts > self.config.max_retries {
                return Err(MarketDataError::Transport {
                    attempts,
                    message: retry_after.0,
                });
            }
            let wait = retry_after.1.unwrap_or(backoff).min(self.config.max_backoff);
            thread::sleep(wait);
            backoff = (backoff * 2).min(self.config.max_backoff);
        }
    }
}

fn decode_body(body: &str) -> Result<Vec<Value>, MarketDataError> {
    let value: Value = serde_json::from_str(body).map_err(|e| MarketDataError::Parse {
        row: 0,
        message: e.to_string(),
    })?;
    match value {
        Value::Array(rows) => Ok(rows),
        other => Err(remote_error(&other.to_string()).unwrap_or(MarketDataError::Parse {
            row: 0,
            message: "expected an array of klines".into(),
        })),
    }
}

fn remote_error(body: &str) -> Option<MarketDataError> {
    let v: Value = serde_json::from_str(body).ok()?;
    let code = v.get("code")?.as_i64()?;
    let message = v.get("msg").and_then(Value::as_str).unwrap_or("").to_string();
    Some(MarketDataError::Remote { code, message })
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::String(s) => s.parse().ok(),
        Value::Number(n) => n.as_f64(),
        _ => None,
    }
}

/// Converts one kline array into a candle, snapping the timestamp to the bar open.
fn parse_kline_row(row: &Value, interval_ms: i64) -> Result<Candle, String> {
    let fields = row.as_array().ok_or("kline row is not an array")?;
    if fields.len() < 6 {
        return Err(format!("kline row has {} fields, need 6", fields.len()));
    }
    let raw_time = fields[0].as_i64().ok_or("open time is not an integer")?;
    let open_time = raw_time - raw_time.rem_euclid(interval_ms);
    let mut vals = [0.0; 5];
    for (slot, field) in vals.iter_mut().zip(&fields[1..6]) {
        *slot = number(field).ok_or_else(|| format!("non-numeric field {field}"))?;
    }
    Ok(Candle::new(open_time, vals[0], vals[1], vals[2], vals[3], vals[4]))
}

fn interval_code(interval_ms: i64) -> Result<&'static str, MarketDataError> {
    const MIN: i64 = 60_000;
    Ok(match interval_ms {
        x if x == MIN => "1m",
        x if x == 5 * MIN => "5m",
        x if x == 15 * MIN => "15m",
        x if x == 30 * MIN => "30m",
        x if x == 60 * MIN => "1h",
        x if x == 120 * MIN => "2h",
        x if x == 240 * MIN => "4h",
        x if x == 360 * MIN => "6h",
        x if x == 720 * MIN => "12h",
        x if x == 1440 * MIN => "1d",
        other => {
            return Err(MarketDataError::InvalidRequest(format!(
                "unsupported interval {other} ms"
            )))
        }
    })
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(i64::MAX)
}
