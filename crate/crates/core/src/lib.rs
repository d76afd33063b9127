//! Core library for multi-emitter localization from sparse spectrum power maps.
//!
//! The pipeline simulates received-power measurements from a handful of
//! low-cost sensors scattered over a planar region, trains compact CNNs to
//! detect and localize an unknown number of RF emitters, and evaluates them
//! with cardinality and localization metrics.
//!
//! Module map:
//!
//! - [`grid`]: region geometry, cell indexing, centroids, quantization.
//! - [`propagation`]: free-space power synthesis, sensor sampling, input transform.
//! - [`scene`]: random scene sampling and training-example construction.
//! - [`dataset`]: versioned binary dataset persistence with manifests.
//! - [`autodiff`]: reverse-mode automatic differentiation and Adam.
//! - [`networks`]: the occupancy encoder-decoder and the residual localizers.
//! - [`loss`]: permutation-invariant existence+location loss and occupancy BCE.
//! - [`assign`]: minimum-cost assignment (exhaustive and Hungarian).
//! - [`metrics`]: CMR / RMSE / FA / MR evaluation.
//! - [`checkpoint`]: self-describing network checkpoints.
//! - [`train`]: training loops, validation tracking, evaluation drivers.
//! - [`render`]: power-map rendering with prediction overlays.

pub mod assign;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod networks;
pub mod propagation;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, ErrorClass};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
