use serde::{Deserialize, Serialize};

use super::{CandleSeries, MarketDataError};

/// Minimum next-bar excursion (as a fraction of the current close) for a directional label.
pub const DEFAULT_LABEL_THRESHOLD: f64 = 0.0075;

/// Three-way direction class: long, short, or hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DirectionLabel {
    #[serde(rename = "c0")]
    Long,
    #[serde(rename = "c1")]
    Short,
    #[serde(rename = "c2")]
    Hold,
}

impl DirectionLabel {
    pub const ALL: [DirectionLabel; 3] = [Self::Long, Self::Short, Self::Hold];

    pub fn class_index(self) -> usize {
        match self {
            Self::Long => 0,
            Self::Short => 1,
            Self::Hold => 2,
        }
    }

    pub fn from_class_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            Self::Long => "c0",
            Self::Short => "c1",
            Self::Hold => "c2",
        }
    }

    pub fn is_directional(self) -> bool {
        !matches!(self, Self::Hold)
    }
}

impl std::fmt::Display for DirectionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for DirectionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "c0" | "long" | "0" => Ok(Self::Long),
            "c1" | "short" | "1" => Ok(Self::Short),
            "c2" | "hold" | "2" => Ok(Self::Hold),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

/// Label of bar `index` together with the next-bar excursions `up` (u) and `down` (v).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub index: usize,
    pub up: f64,
    pub down: f64,
    pub label: DirectionLabel,
}

pub fn compute_label(series: &CandleSeries, t: usize) -> Result<LabeledPoint, MarketDataError> {
    compute_label_with(series, t, DEFAULT_LABEL_THRESHOLD)
}

/// Labels bar `t` from bar `t + 1`. Long wins when both thresholds are crossed.
pub fn compute_label_with(
    series: &CandleSeries,
    t: usize,
    threshold: f64,
) -> Result<LabeledPoint, MarketDataError> {
    let current = series.get(t).ok_or(MarketDataError::OutOfRange {
        index: t,
        len: series.len(),
    })?;
    let next = series.get(t + 1).ok_or(MarketDataError::NoNextBar(t))?;
    let up = (next.high - current.close) / current.close;
    let down = (next.low - current.close) / current.close;
    let label = if up >= threshold {
        DirectionLabel::Long
    } else if down <= -threshold {
        DirectionLabel::Short
    } else {
        DirectionLabel::Hold
    };
    Ok(LabeledPoint {
        index: t,
        up,
        down,
        label,
    })
}

/// Labels every bar that has a successor.
pub fn label_all(series: &CandleSeries, threshold: f64) -> Vec<LabeledPoint> {
    (0..series.len().saturating_sub(1))
        .map(|t| compute_label_with(series, t, threshold).expect("index has a next bar"))
        .collect()
}

/// Writes `open_time_ms,up,down,label` rows, one per labeled point.
pub fn write_labels(
    series: &CandleSeries,
    points: &[LabeledPoint],
    sink: impl std::io::Write,
) -> Result<(), MarketDataError> {
    let err = |e: csv::Error| MarketDataError::Write(e.to_string());
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["open_time_ms", "up", "down", "label"]).map_err(err)?;
    for p in points {
        let c = series.get(p.index).ok_or(MarketDataError::OutOfRange {
            index: p.index,
            len: series.len(),
        })?;
        w.write_record([
            c.open_time.to_string(),
            p.up.to_string(),
            p.down.to_string(),
            p.label.code().to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| MarketDataError::Write(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub long: f64,
    pub short: f64,
    pub hold: f64,
}

pub fn label_distribution(points: &[LabeledPoint]) -> Result<LabelDistribution, MarketDataError> {
    if points.is_empty() {
        return Err(MarketDataError::Empty);
    }
    let mut counts = [0usize; 3];
    for p in points {
        counts[p.label.class_index()] += 1;
    }
    let n = points.len() as f64;
    Ok(LabelDistribution {
        long: counts[0] as f64 / n,
        short: counts[1] as f64 / n,
        hold: counts[2] as f64 / n,
    })
}
