//! Time-aware GPT sequence classifier for transaction fraud detection.
//!
//! The crate covers the full experimental pipeline: synthetic labeled event
//! corpora, per-column tokenization with quantile binning, sinusoidal and
//! rotary time encoders over absolute or relative timestamps, a causal
//! transformer classifier with reverse-mode differentiation, training and
//! ablation runners, ranking metrics, and a logistic-regression baseline.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod logreg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seedutil;
pub mod time_encoding;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
