//! Per-bar chart features: BOP, EBSW, CMF, DIFF ratios and INTRA ratios.
//!
//! Row layout is `[bop, ebsw, cmf, diff_<field>_<k> x 60, intra x 6]`, 69 values.
//! Every feature is a price ratio or a normalized oscillator, so rows are invariant
//! under multiplying all prices by a positive constant.

use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{Candle, CandleSeries};

pub const CMF_PERIOD: usize = 20;
pub const EBSW_LENGTH: usize = 40;
pub const EBSW_BARS: usize = 10;
pub const DIFF_MAX_K: usize = 12;
/// Denominator used in place of an exact zero in DIFF ratios.
pub const DIFF_EPSILON: f64 = 1e-12;
pub const BASE_FEATURE_COUNT: usize = 3 + 5 * DIFF_MAX_K + 6;

const DIFF_FIELDS: [&str; 5] = ["open", "high", "low", "close", "volume"];
const INTRA_NAMES: [&str; 6] = [
    "intra_high_low",
    "intra_high_open",
    "intra_low_open",
    "intra_close_open",
    "intra_high_close",
    "intra_low_close",
];

#[derive(Debug, Error)]
pub enum IndicatorError {
    #[error("bar {index} needs {needed} bars of history")]
    Warmup { index: usize, needed: usize },
    #[error("series of length {len} is not longer than the warmup of {warmup} bars")]
    TooShort { len: usize, warmup: usize },
    #[error("index {index} out of range for series of length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("feature csv: {0}")]
    Format(String),
}

fn checked(series: &CandleSeries, t: usize) -> Result<&Candle, IndicatorError> {
    series.get(t).ok_or(IndicatorError::OutOfRange {
        index: t,
        len: series.len(),
    })
}

pub fn bop(series: &CandleSeries, t: usize) -> Result<f64, IndicatorError> {
    Ok(bop_of(checked(series, t)?))
}

fn bop_of(c: &Candle) -> f64 {
    let range = c.high - c.low;
    if range == 0.0 {
        0.0
    } else {
        (c.close - c.open) / range
    }
}

/// Chaikin money flow over the `period` bars ending at `t`.
pub fn cmf(series: &CandleSeries, t: usize, period: usize) -> Result<f64, IndicatorError> {
    checked(series, t)?;
    if period == 0 || t + 1 < period {
        return Err(IndicatorError::Warmup {
            index: t,
            needed: period.saturating_sub(1),
        });
    }
    let window = &series.candles()[t + 1 - period..=t];
    let mut flow = 0.0;
    let mut volume = 0.0;
    for c in window {
        let range = c.high - c.low;
        if range != 0.0 {
            flow += c.volume * ((c.close - c.low) - (c.high - c.close)) / range;
        }
        volume += c.volume;
    }
    Ok(if volume == 0.0 { 0.0 } else { flow / volume })
}

/// Ehlers' Even Better Sinewave over the whole series.
///
/// A two-pole high-pass at `length` feeds a SuperSmoother over `bars`; the output is the
/// 3-bar mean of the filter normalized by the root of its 3-bar mean power. Values
/// before index `length - 1` are `None`. A zero-power window yields 0.
pub fn ebsw_series(series: &CandleSeries, length: usize, bars: usize) -> Vec<Option<f64>> {
    let closes: Vec<f64> = series.candles().iter().map(|c| c.close).collect();
    ebsw_values(&closes, length, bars)
}

pub fn ebsw(
    series: &CandleSeries,
    t: usize,
    length: usize,
    bars: usize,
) -> Result<f64, IndicatorError> {
    checked(series, t)?;
    let closes: Vec<f64> = series.candles()[..=t].iter().map(|c| c.close).collect();
    ebsw_values(&closes, length, bars)[t].ok_or(IndicatorError::Warmup {
        index: t,
        needed: ebsw_warmup(length),
    })
}

pub fn ebsw_warmup(length: usize) -> usize {
    length.saturating_sub(1)
}

fn ebsw_values(closes: &[f64], length: usize, bars: usize) -> Vec<Option<f64>> {
    let angle = 2.0 * PI / length as f64;
    let alpha = (1.0 - angle.sin()) / angle.cos();
    let a1 = (-SQRT_2 * PI / bars as f64).exp();
    let c2 = 2.0 * a1 * (SQRT_2 * PI / bars as f64).cos();
    let c3 = -a1 * a1;
    let c1 = 1.0 - c2 - c3;

    let warmup = ebsw_warmup(length);
    let mut out = vec![None; closes.len()];
    let (mut hp_prev, mut filt1, mut filt2) = (0.0, 0.0, 0.0);
    for i in 0..closes.len() {
        let hp = if i == 0 {
            0.0
        } else {
            0.5 * (1.0 + alpha) * (closes[i] - closes[i - 1]) + alpha * hp_prev
        };
        let filt = c1 * (hp + hp_prev) / 2.0 + c2 * filt1 + c3 * filt2;
        let wave = (filt + filt1 + filt2) / 3.0;
        let power = (filt * filt + filt1 * filt1 + filt2 * filt2) / 3.0;
        let value = if power > 0.0 {
            (wave / power.sqrt()).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        if i >= warmup {
            out[i] = Some(value);
        }
        hp_prev = hp;
        filt2 = filt1;
        filt1 = filt;
    }
    out
}

fn field(c: &Candle, index: usize) -> f64 {
    match index {
        0 => c.open,
        1 => c.high,
        2 => c.low,
        3 => c.close,
        _ => c.volume,
    }
}

/// `field_t / field_{t-k}` for open, high, low, close, volume and k = 1..=max_k, grouped by field.
pub fn diff_features(
    series: &CandleSeries,
    t: usize,
    max_k: usize,
) -> Result<Vec<f64>, IndicatorError> {
    let current = checked(series, t)?;
    if t < max_k {
        return Err(IndicatorError::Warmup {
            index: t,
            needed: max_k,
        });
    }
    let candles = series.candles();
    let mut out = Vec::with_capacity(5 * max_k);
    for f in 0..DIFF_FIELDS.len() {
        let now = field(current, f);
        for k in 1..=max_k {
            let past = field(&candles[t - k], f);
            let denom = if past == 0.0 { DIFF_EPSILON } else { past };
            out.push(now / denom);
        }
    }
    Ok(out)
}

pub fn intra_features(c: &Candle) -> [f64; 6] {
    [
        c.high / c.low,
        c.high / c.open,
        c.low / c.open,
        c.close / c.open,
        c.high / c.close,
        c.low / c.close,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub timestamp: i64,
    pub values: Vec<f64>,
}

/// Rows of features aligned to a series suffix; row `i` describes bar `warmup + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    names: Arc<Vec<String>>,
    rows: Vec<FeatureVector>,
    warmup: usize,
}

impl FeatureMatrix {
    pub fn new(
        names: Vec<String>,
        rows: Vec<FeatureVector>,
        warmup: usize,
    ) -> Result<Self, IndicatorError> {
        for w in rows.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(IndicatorError::Format(format!(
                    "row timestamps not increasing at {}",
                    w[1].timestamp
                )));
            }
        }
        if let Some(bad) = rows.iter().find(|r| r.values.len() != names.len()) {
            return Err(IndicatorError::Format(format!(
                "row {} has {} values, expected {}",
                bad.timestamp,
                bad.values.len(),
                names.len()
            )));
        }
        if let Some(bad) = rows.iter().find(|r| r.values.iter().any(|v| !v.is_finite())) {
            return Err(IndicatorError::Format(format!(
                "non-finite value in row {}",
                bad.timestamp
            )));
        }
        Ok(Self {
            names: Arc::new(names),
            rows,
            warmup,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rows(&self) -> &[FeatureVector] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> Option<&FeatureVector> {
        self.rows.get(i)
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    /// Row for series bar `index`, if it survived warmup trimming.
    pub fn row_for_bar(&self, index: usize) -> Option<&FeatureVector> {
        index.checked_sub(self.warmup).and_then(|i| self.rows.get(i))
    }

    pub fn write_csv(&self, sink: impl Write) -> Result<(), IndicatorError> {
        let err = |e: csv::Error| IndicatorError::Format(e.to_string());
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for row in &self.rows {
            let mut rec = vec![row.timestamp.to_string()];
            rec.extend(row.values.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| IndicatorError::Format(e.to_string()))
    }

    pub fn read_csv(source: impl Read, warmup: usize) -> Result<Self, IndicatorError> {
        let mut r = csv::Reader::from_reader(source);
        let header = r
            .headers()
            .map_err(|e| IndicatorError::Format(e.to_string()))?
            .clone();
        if header.get(0) != Some("timestamp") {
            return Err(IndicatorError::Format("first column must be `timestamp`".into()));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| IndicatorError::Format(format!("row {}: {e}", i + 1)))?;
            let parse_err = |e: &dyn std::fmt::Display| {
                IndicatorError::Format(format!("row {}: {e}", i + 1))
            };
            let timestamp = rec
                .get(0)
                .unwrap_or("")
                .parse::<i64>()
                .map_err(|e| parse_err(&e))?;
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| parse_err(&e)))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(FeatureVector { timestamp, values });
        }
        Self::new(names, rows, warmup)
    }
}

pub fn base_feature_names() -> Vec<String> {
    let mut names = vec!["bop".to_string(), "ebsw".to_string(), "cmf".to_string()];
    for f in DIFF_FIELDS {
        for k in 1..=DIFF_MAX_K {
            names.push(format!("diff_{f}_{k}"));
        }
    }
    names.extend(INTRA_NAMES.iter().map(|s| s.to_string()));
    names
}

/// Leading bars dropped before the first fully defined row.
pub fn feature_warmup() -> usize {
    ebsw_warmup(EBSW_LENGTH)
        .max(CMF_PERIOD - 1)
        .max(DIFF_MAX_K)
}

pub fn assemble_features(series: &CandleSeries) -> Result<FeatureMatrix, IndicatorError> {
    let warmup = feature_warmup();
    if series.len() <= warmup {
        return Err(IndicatorError::TooShort {
            len: series.len(),
            warmup,
        });
    }
    let ebsw_all = ebsw_series(series, EBSW_LENGTH, EBSW_BARS);
    let rows = (warmup..series.len())
        .map(|t| {
            let c = &series.candles()[t];
            let mut values = Vec::with_capacity(BASE_FEATURE_COUNT);
            values.push(bop_of(c));
            values.push(ebsw_all[t].expect("past ebsw warmup"));
            values.push(cmf(series, t, CMF_PERIOD)?);
            values.extend(diff_features(series, t, DIFF_MAX_K)?);
            values.extend(intra_features(c));
            Ok(FeatureVector {
                timestamp: c.open_time,
                values,
            })
        })
        .collect::<Result<Vec<_>, IndicatorError>>()?;
    FeatureMatrix::new(base_feature_names(), rows, warmup)
}
