#![allow(dead_code)]

use chartvote_core::market_data::{Candle, CandleSeries, FOUR_HOURS_MS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const START_MS: i64 = 1_503_504_000_000;

/// Regime-switching random walk: a persistent hidden state sets drift and volatility,
/// so recent bar shapes carry some information about the next bar.
pub fn regime_series(n: usize, seed: u64) -> CandleSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let regimes = [(0.004, 0.008), (-0.004, 0.008), (0.0, 0.003)];
    let mut state = 0usize;
    let mut close = 4_000.0;
    let mut candles = Vec::with_capacity(n);
    for i in 0..n {
        if rng.random::<f64>() < 0.08 {
            state = rng.random_range(0..3);
        }
        let (drift, vol) = regimes[state];
        let open = close;
        let ret: f64 = drift + vol * noise.sample(&mut rng);
        close = open * (1.0 + ret).max(0.5);
        let wick_up: f64 = vol * noise.sample(&mut rng).abs() * 0.8;
        let wick_down: f64 = vol * noise.sample(&mut rng).abs() * 0.8;
        let high = open.max(close) * (1.0 + wick_up);
        let low = open.min(close) * (1.0 - wick_down);
        let volume = 100.0 * (1.0 + 5.0 * vol / 0.008) * (0.5 + rng.random::<f64>());
        candles.push(Candle::new(START_MS + i as i64 * FOUR_HOURS_MS, open, high, low, close, volume));
    }
    CandleSeries::four_hour(candles).unwrap()
}

/// Raw kline arrays in the exchange's schema (prices as strings).
pub fn kline_json(c: &Candle) -> serde_json::Value {
    serde_json::json!([
        c.open_time,
        c.open.to_string(),
        c.high.to_string(),
        c.low.to_string(),
        c.close.to_string(),
        c.volume.to_string(),
        c.open_time + FOUR_HOURS_MS - 1,
        "0",
        1,
        "0",
        "0",
        "0"
    ])
}
