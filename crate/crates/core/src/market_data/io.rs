use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Candle, CandleSeries, GapPolicy, MarketDataError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl std::str::FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown data format `{other}`")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CandleRow {
    open_time_ms: i64,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: f64,
}

impl From<CandleRow> for Candle {
    fn from(r: CandleRow) -> Self {
        Candle::new(r.open_time_ms, r.open, r.high, r.low, r.close, r.volume)
    }
}

impl From<&Candle> for CandleRow {
    fn from(c: &Candle) -> Self {
        Self {
            open_time_ms: c.open_time,
            open: c.open,
            high: c.high,
            low: c.low,
            close: c.close,
            volume: c.volume,
        }
    }
}

/// Reads candles from CSV (header `open_time_ms,open,high,low,close,volume`)
/// or a JSON array of objects with the same keys. Rows may be unsorted.
pub fn parse_candles(
    source: impl Read,
    format: DataFormat,
    interval_ms: i64,
    gaps: GapPolicy,
) -> Result<CandleSeries, MarketDataError> {
    let candles = match format {
        DataFormat::Csv => parse_csv(source)?,
        DataFormat::Json => parse_json(source)?,
    };
    CandleSeries::with_gap_policy(candles, interval_ms, gaps)
}

fn parse_csv(source: impl Read) -> Result<Vec<Candle>, MarketDataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| MarketDataError::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    for required in ["open_time_ms", "open", "high", "low", "close", "volume"] {
        if !headers.iter().any(|h| h == required) {
            return Err(MarketDataError::Parse {
                row: 0,
                message: format!("missing column `{required}`"),
            });
        }
    }
    let mut out = Vec::new();
    for (i, record) in reader.deserialize::<CandleRow>().enumerate() {
        let row = record.map_err(|e| MarketDataError::Parse {
            row: i + 1,
            message: e.to_string(),
        })?;
        out.push(row.into());
    }
    Ok(out)
}

fn parse_json(source: impl Read) -> Result<Vec<Candle>, MarketDataError> {
    let values: Vec<serde_json::Value> =
        serde_json::from_reader(source).map_err(|e| MarketDataError::Parse {
            row: 0,
            message: e.to_string(),
        })?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value::<CandleRow>(v)
                .map(Candle::from)
                .map_err(|e| MarketDataError::Parse {
                    row: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn write_candles(
    series: &CandleSeries,
    sink: impl Write,
    format: DataFormat,
) -> Result<(), MarketDataError> {
    let io_err = MarketDataError::Write;
    match format {
        DataFormat::Csv => {
            let mut w = csv::Writer::from_writer(sink);
            for c in series.candles() {
                w.serialize(CandleRow::from(c))
                    .map_err(|e| io_err(e.to_string()))?;
            }
            w.flush().map_err(|e| io_err(e.to_string()))
        }
        DataFormat::Json => {
            let rows: Vec<CandleRow> = series.candles().iter().map(CandleRow::from).collect();
            serde_json::to_writer(sink, &rows).map_err(|e| io_err(e.to_string()))
        }
    }
}
