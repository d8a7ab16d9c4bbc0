//! One-bar-horizon backtest of direction predictions with a stop loss and per-fill commission.
//!
//! A long (short) prediction at bar `t` enters at `close_t` and is resolved during bar
//! `t + 1`: if the bar's low (high) breaches the stop, the trade exits at the stop price,
//! otherwise at `close_{t+1}`. The stop is checked first. Hold predictions stay flat.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{CandleSeries, DirectionLabel};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{count} predictions starting at bar {start} need bars up to {needed}, series has {len}")]
    Alignment {
        start: usize,
        count: usize,
        needed: usize,
        len: usize,
    },
    #[error("empty range")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    pub stop_loss: f64,
    pub take_profit: Option<f64>,
    /// Fraction charged on each fill (entry and exit).
    pub commission: f64,
    pub initial_equity: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            stop_loss: 0.0075,
            take_profit: None,
            commission: 0.0004,
            initial_equity: 1.0,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        if !(self.stop_loss > 0.0 && self.stop_loss < 1.0) {
            return Err(BacktestError::Config("stop_loss must be in (0, 1)".into()));
        }
        if !(self.commission >= 0.0) {
            return Err(BacktestError::Config("commission must be >= 0".into()));
        }
        if !(self.initial_equity > 0.0) {
            return Err(BacktestError::Config("initial_equity must be positive".into()));
        }
        if let Some(tp) = self.take_profit {
            if !(tp > 0.0) {
                return Err(BacktestError::Config("take_profit must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Long,
    Short,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    BarClose,
    StopLoss,
    TakeProfit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub entry_index: usize,
    pub entry_time: i64,
    pub side: Side,
    pub entry_price: f64,
    pub exit_price: f64,
    pub exit_reason: ExitReason,
    pub gross_return: f64,
    pub net_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityCurve {
    /// Open time of the bar each point is measured at the close of.
    pub timestamps: Vec<i64>,
    pub equity: Vec<f64>,
}

impl EquityCurve {
    pub fn final_equity(&self) -> f64 {
        *self.equity.last().expect("curve is never empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub curve: EquityCurve,
    pub trades: Vec<Trade>,
}

/// Simulates `predictions[i]` issued at the close of bar `start + i`.
pub fn simulate(
    predictions: &[DirectionLabel],
    start: usize,
    series: &CandleSeries,
    config: &BacktestConfig,
) -> Result<BacktestResult, BacktestError> {
    config.validate()?;
    let needed = start + predictions.len();
    if needed >= series.len() {
        return Err(BacktestError::Alignment {
            start,
            count: predictions.len(),
            needed,
            len: series.len(),
        });
    }
    let candles = series.candles();
    let mut equity = Vec::with_capacity(predictions.len() + 1);
    let mut timestamps = Vec::with_capacity(predictions.len() + 1);
    let mut trades = Vec::new();
    let mut current = config.initial_equity;
    equity.push(current);
    timestamps.push(candles[start].open_time);

    for (offset, prediction) in predictions.iter().enumerate() {
        let t = start + offset;
        let (bar, next) = (&candles[t], &candles[t + 1]);
        let side = match prediction {
            DirectionLabel::Long => Some(Side::Long),
            DirectionLabel::Short => Some(Side::Short),
            DirectionLabel::Hold => None,
        };
        if let Some(side) = side {
            let entry = bar.close;
            let (stop_price, stop_hit) = match side {
                Side::Long => {
                    let p = entry * (1.0 - config.stop_loss);
                    (p, next.low <= p)
                }
                Side::Short => {
                    let p = entry * (1.0 + config.stop_loss);
                    (p, next.high >= p)
                }
            };
            let take = config.take_profit.and_then(|tp| match side {
                Side::Long => {
                    let p = entry * (1.0 + tp);
                    (next.high >= p).then_some((p, tp))
                }
                Side::Short => {
                    let p = entry * (1.0 - tp);
                    (next.low <= p).then_some((p, tp))
                }
            });
            let (exit_price, exit_reason, gross) = if stop_hit {
                (stop_price, ExitReason::StopLoss, -config.stop_loss)
            } else if let Some((p, tp)) = take {
                (p, ExitReason::TakeProfit, tp)
            } else {
                let g = match side {
                    Side::Long => next.close / entry - 1.0,
                    Side::Short => 1.0 - next.close / entry,
                };
                (next.close, ExitReason::BarClose, g)
            };
            let net = gross - 2.0 * config.commission;
            current *= 1.0 + net;
            trades.push(Trade {
                entry_index: t,
                entry_time: bar.open_time,
                side,
                entry_price: entry,
                exit_price,
                exit_reason,
                gross_return: gross,
                net_return: net,
            });
        }
        equity.push(current);
        timestamps.push(next.open_time);
    }
    Ok(BacktestResult {
        curve: EquityCurve { timestamps, equity },
        trades,
    })
}

/// Passive benchmark over bars `start..=end`: `initial * close_t / close_start`.
pub fn buy_and_hold(
    series: &CandleSeries,
    start: usize,
    end: usize,
    initial_equity: f64,
) -> Result<EquityCurve, BacktestError> {
    if start > end || end >= series.len() {
        return Err(BacktestError::Empty);
    }
    let bars = &series.candles()[start..=end];
    let first = bars[0].close;
    Ok(EquityCurve {
        timestamps: bars.iter().map(|c| c.open_time).collect(),
        equity: bars.iter().map(|c| initial_equity * c.close / first).collect(),
    })
}

pub fn write_trades(trades: &[Trade], sink: impl Write) -> Result<(), BacktestError> {
    let mut w = csv::Writer::from_writer(sink);
    for t in trades {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

/// `timestamp,strategy_equity,buy_and_hold_equity` rows.
pub fn write_equity(
    strategy: &EquityCurve,
    benchmark: &EquityCurve,
    sink: impl Write,
) -> Result<(), BacktestError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["timestamp", "strategy_equity", "buy_and_hold_equity"])?;
    for ((t, s), b) in strategy
        .timestamps
        .iter()
        .zip(&strategy.equity)
        .zip(&benchmark.equity)
    {
        w.write_record([t.to_string(), s.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
