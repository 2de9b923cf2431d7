// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row ({head}, {row}) sums to {sum}, outside 1 +/- {tolerance}")]
    NonStochasticRow {
        head: usize,
        row: usize,
        sum: f64,
        tolerance: f64,
    },

    #[error("negative attention weight {value} at ({head}, {row}, {col})")]
    NegativeWeight {
        head: usize,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("monitored dimension {dim} out of range for hidden size {hidden}")]
    DimensionOutOfRange { dim: usize, hidden: usize },

    #[error("invalid token context: {0}")]
    InvalidContext(String),

    #[error("invalid sink criterion: {0}")]
    InvalidCriterion(String),

    #[error("scaling factor p = {0} must lie in (0, 1], with 1 as the no-op sentinel")]
    InvalidP(f64),

    #[error("image-span mass is zero after removing visual sinks (head {head}, row {row})")]
    ZeroImageMass { head: usize, row: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("bad trace magic {found:?}")]
    BadMagic { found: [u8; 8] },

    #[error("trace version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("trace payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("trace metadata {path}: {message}")]
    Metadata { path: PathBuf, message: String },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
