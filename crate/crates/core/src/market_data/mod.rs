//! OHLCV candles, series validation, direction labels and the kline fetcher.

mod fetch;
mod io;
mod label;

pub use fetch::{FetchConfig, KlineClient, API_BASE_ENV, DEFAULT_API_BASE, MAX_LIMIT};
pub use io::{parse_candles, write_candles, DataFormat};
pub use label::{
    compute_label, compute_label_with, label_all, label_distribution, write_labels, DirectionLabel,
    LabelDistribution, LabeledPoint, DEFAULT_LABEL_THRESHOLD,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Four hours in milliseconds.
pub const FOUR_HOURS_MS: i64 = 4 * 60 * 60 * 1000;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("invalid candle at {open_time}: {reason}")]
    InvalidCandle { open_time: i64, reason: String },
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(i64),
    #[error("gap in series: expected bar at {missing}, next bar is at {found}")]
    Gap { missing: i64, found: i64 },
    #[error("series is empty")]
    EmptySeries,
    #[error("bar {0} has no following bar to label against")]
    NoNextBar(usize),
    #[error("index {index} out of range for series of length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("empty input")]
    Empty,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("exchange returned error {code}: {message}")]
    Remote { code: i64, message: String },
    #[error("write failed: {0}")]
    Write(String),
}

/// One OHLCV bar. `open_time` is epoch milliseconds UTC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candle {
    pub open_time: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Candle {
    pub fn new(open_time: i64, open: f64, high: f64, low: f64, close: f64, volume: f64) -> Self {
        Self {
            open_time,
            open,
            high,
            low,
            close,
            volume,
        }
    }

    pub fn validate(&self) -> Result<(), MarketDataError> {
        let fail = |reason: &str| {
            Err(MarketDataError::InvalidCandle {
                open_time: self.open_time,
                reason: reason.to_string(),
            })
        };
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite()) || !self.volume.is_finite() {
            return fail("non-finite value");
        }
        if prices.iter().any(|&p| p <= 0.0) {
            return fail("prices must be strictly positive");
        }
        if self.volume < 0.0 {
            return fail("negative volume");
        }
        if self.high < self.low {
            return fail("low > high");
        }
        if self.high < self.open.max(self.close) {
            return fail("high below open/close");
        }
        if self.low > self.open.min(self.close) {
            return fail("low above open/close");
        }
        Ok(())
    }

    /// Same bar with every price multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            open: self.open * factor,
            high: self.high * factor,
            low: self.low * factor,
            close: self.close * factor,
            ..*self
        }
    }
}

/// How to treat missing bars when assembling a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapPolicy {
    /// Any missing bar is a [`MarketDataError::Gap`].
    #[default]
    Error,
    /// Missing bars are synthesized as flat bars at the previous close with zero volume.
    ForwardFill,
    /// Missing bars are tolerated; the series keeps only the bars that exist.
    Keep,
}

/// Validated, strictly increasing candle sequence on a fixed interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CandleSeries {
    candles: Vec<Candle>,
    interval_ms: i64,
}

impl CandleSeries {
    /// Sorts, validates every candle and enforces uniform spacing.
    pub fn new(candles: Vec<Candle>, interval_ms: i64) -> Result<Self, MarketDataError> {
        Self::with_gap_policy(candles, interval_ms, GapPolicy::Error)
    }

    pub fn with_gap_policy(
        mut candles: Vec<Candle>,
        interval_ms: i64,
        policy: GapPolicy,
    ) -> Result<Self, MarketDataError> {
        if interval_ms <= 0 {
            return Err(MarketDataError::InvalidRequest(format!(
                "interval must be positive, got {interval_ms}"
            )));
        }
        for c in &candles {
            c.validate()?;
        }
        candles.sort_by_key(|c| c.open_time);
        let mut out: Vec<Candle> = Vec::with_capacity(candles.len());
        for c in candles {
            if let Some(prev) = out.last().copied() {
                if c.open_time == prev.open_time {
                    return Err(MarketDataError::DuplicateTimestamp(c.open_time));
                }
                let expected = prev.open_time + interval_ms;
                if c.open_time != expected {
                    match policy {
                        GapPolicy::Error => {
                            return Err(MarketDataError::Gap {
                                missing: expected,
                                found: c.open_time,
                            })
                        }
                        GapPolicy::ForwardFill => {
                            let mut t = expected;
                            while t < c.open_time {
                                out.push(Candle::new(
                                    t, prev.close, prev.close, prev.close, prev.close, 0.0,
                                ));
                                t += interval_ms;
                            }
                            if t != c.open_time {
                                return Err(MarketDataError::InvalidCandle {
                                    open_time: c.open_time,
                                    reason: "timestamp not aligned to interval".into(),
                                });
                            }
                        }
                        GapPolicy::Keep => {}
                    }
                }
            }
            out.push(c);
        }
        Ok(Self {
            candles: out,
            interval_ms,
        })
    }

    pub fn four_hour(candles: Vec<Candle>) -> Result<Self, MarketDataError> {
        Self::new(candles, FOUR_HOURS_MS)
    }

    pub fn candles(&self) -> &[Candle] {
        &self.candles
    }

    pub fn get(&self, index: usize) -> Option<&Candle> {
        self.candles.get(index)
    }

    pub fn len(&self) -> usize {
        self.candles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candles.is_empty()
    }

    pub fn interval_ms(&self) -> i64 {
        self.interval_ms
    }

    /// Index of the bar opening at `open_time`, if present.
    pub fn position(&self, open_time: i64) -> Option<usize> {
        self.candles
            .binary_search_by_key(&open_time, |c| c.open_time)
            .ok()
    }

    /// Copy with all prices multiplied by `factor` (volumes untouched).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            candles: self.candles.iter().map(|c| c.scaled(factor)).collect(),
            interval_ms: self.interval_ms,
        }
    }

    /// Copy with `edit` applied to every candle at index >= `from`.
    /// The caller is responsible for keeping candles valid.
    pub fn map_from(&self, from: usize, mut edit: impl FnMut(&mut Candle)) -> Self {
        let mut candles = self.candles.clone();
        for c in candles.iter_mut().skip(from) {
            edit(c);
        }
        Self {
            candles,
            interval_ms: self.interval_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bar(t: i64, close: f64) -> Candle {
        Candle::new(t, close, close * 1.01, close * 0.99, close, 10.0)
    }

    #[test]
    fn rejects_low_above_high() {
        let c = Candle::new(0, 10.0, 9.0, 11.0, 10.0, 1.0);
        assert!(matches!(
            c.validate(),
            Err(MarketDataError::InvalidCandle { .. })
        ));
    }

    #[test]
    fn rejects_non_positive_price() {
        let c = Candle::new(0, 0.0, 1.0, 0.0, 1.0, 1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn sorts_unsorted_input() {
        let s = CandleSeries::four_hour(vec![
            bar(2 * FOUR_HOURS_MS, 3.0),
            bar(0, 1.0),
            bar(FOUR_HOURS_MS, 2.0),
        ])
        .unwrap();
        let times: Vec<i64> = s.candles().iter().map(|c| c.open_time).collect();
        assert_eq!(times, vec![0, FOUR_HOURS_MS, 2 * FOUR_HOURS_MS]);
    }

    #[test]
    fn gap_names_missing_timestamp() {
        let err = CandleSeries::four_hour(vec![
            bar(0, 1.0),
            bar(FOUR_HOURS_MS, 1.0),
            bar(3 * FOUR_HOURS_MS, 1.0),
        ])
        .unwrap_err();
        match err {
            MarketDataError::Gap { missing, found } => {
                assert_eq!(missing, 2 * FOUR_HOURS_MS);
                assert_eq!(found, 3 * FOUR_HOURS_MS);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_rejected() {
        let err = CandleSeries::four_hour(vec![bar(0, 1.0), bar(0, 2.0)]).unwrap_err();
        assert!(matches!(err, MarketDataError::DuplicateTimestamp(0)));
    }

    #[test]
    fn forward_fill_inserts_flat_bars() {
        let s = CandleSeries::with_gap_policy(
            vec![bar(0, 5.0), bar(3 * FOUR_HOURS_MS, 6.0)],
            FOUR_HOURS_MS,
            GapPolicy::ForwardFill,
        )
        .unwrap();
        assert_eq!(s.len(), 4);
        let filled = s.get(1).unwrap();
        assert_eq!(filled.close, 5.0);
        assert_eq!(filled.volume, 0.0);
        assert_eq!(filled.open_time, FOUR_HOURS_MS);
    }

    #[test]
    fn keep_policy_tolerates_gaps() {
        let s = CandleSeries::with_gap_policy(
            vec![bar(0, 5.0), bar(3 * FOUR_HOURS_MS, 6.0)],
            FOUR_HOURS_MS,
            GapPolicy::Keep,
        )
        .unwrap();
        assert_eq!(s.len(), 2);
    }
}
