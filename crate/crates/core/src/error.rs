//! Crate-wide error type.
//!
//! Variants are grouped by failure class so the CLI can map them onto its
//! exit-code contract: configuration errors (2), data errors (3), and
//! numeric failures (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // ---- domain / configuration ----
    #[error("point ({x}, {y}) lies outside the region ({width_m} m x {height_m} m)")]
    OutOfRegion {
        x: f64,
        y: f64,
        width_m: f64,
        height_m: f64,
    },

    #[error("cell index ({u}, {v}) out of range for a {h} x {w} grid")]
    CellOutOfRange { u: i64, v: i64, h: usize, w: usize },

    #[error("emitters {first} and {second} fall in the same cell ({u}, {v})")]
    DuplicateCell {
        first: usize,
        second: usize,
        u: usize,
        v: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("optimizer state does not match parameter {name}: state length {state_len}, parameter length {param_len}")]
    OptimizerShapeDrift {
        name: String,
        state_len: usize,
        param_len: usize,
    },

    // ---- data ----
    #[error("scene generation failed: {0}")]
    SceneGeneration(String),

    #[error("dataset format version mismatch: found {found}, expected {expected}")]
    DatasetVersion { found: u32, expected: u32 },

    #[error("dataset file truncated while reading {context}")]
    DatasetTruncated { context: String },

    #[error("checksum mismatch in record {index}: stored {stored:#018x}, computed {computed:#018x}")]
    DatasetChecksum {
        index: u64,
        stored: u64,
        computed: u64,
    },

    #[error("bad dataset magic bytes: {found:?}")]
    DatasetMagic { found: [u8; 8] },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint does not match the requested network: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("failed to parse {what}: {detail}")]
    Parse { what: String, detail: String },

    // ---- numeric ----
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

/// Failure class used by the CLI exit-code mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            OutOfRegion { .. }
            | CellOutOfRange { .. }
            | DuplicateCell { .. }
            | Config(_)
            | ShapeMismatch { .. }
            | NonScalarLoss { .. }
            | OptimizerShapeDrift { .. } => ErrorClass::Config,
            SceneGeneration(_)
            | DatasetVersion { .. }
            | DatasetTruncated { .. }
            | DatasetChecksum { .. }
            | DatasetMagic { .. }
            | CheckpointFormat(_)
            | CheckpointMismatch(_)
            | Io(_)
            | Parse { .. } => ErrorClass::Data,
            NonFiniteLoss { .. } => ErrorClass::Numeric,
        }
    }
}
