//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is invalid; carries the offending field.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    /// Malformed input data (out-of-order timestamps, negative gaps, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A record line could not be parsed.
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    /// An event is missing a column required by the corpus schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Index outside a table or sequence bound.
    #[error("bounds error: {what} = {index} out of range {limit}")]
    Bounds {
        what: String,
        index: usize,
        limit: usize,
    },

    /// A metric is undefined for the given inputs (single-class, no positives).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Checkpoint version does not match the current format.
    #[error("incompatible checkpoint: found version {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Optimization failed to converge; carries the final gradient norm.
    #[error("did not converge within {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    Diverged { epoch: usize, step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
