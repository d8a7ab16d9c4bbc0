//! Chart-pattern retrieval features for directional forecasting of 4-hour candles.
//!
//! The pipeline labels bars as long/short/hold, retrieves similar past bars
//! (Euclidean over indicator rows, cosine over chart or multimodal embeddings,
//! or random sampling), turns neighbor labels into softmax vote features, trains
//! a gradient-boosted tree classifier with and without those features, and
//! backtests its predictions.

pub mod indicators;
pub mod market_data;
pub mod embeddings;
pub mod retrieval;
pub mod votes;
pub mod gbt;
pub mod backtest;
pub mod pipeline;
