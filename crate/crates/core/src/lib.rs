//! Weak-to-strong annotation for multi-class cell segmentation: box prompts
//! from instance masks, box-prompted pseudo-labels through a pluggable
//! promptable segmenter, confidence-weighted corrective training, and
//! per-class / per-stratum F1 and Dice reports.
//!
//! Numeric code (network, loss, confidence maps) is generic over
//! [`Scalar`]; the aliases below fix the element type used by the pipeline.

pub mod boxgen;
pub mod csvio;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod mocl;
pub mod morph;
pub mod promptseg;
pub mod scalar;
pub mod seeding;

pub use error::{Error, Result};
pub use grid::{BoolGrid, Grid};
pub use scalar::Scalar;

/// Segmenter network used by the pipeline (single precision).
pub type Model = mocl::SegmenterModel<f32>;
/// Double-precision network, used for gradient checks.
pub type Model64 = mocl::SegmenterModel<f64>;
pub type ConfidenceMap = mocl::ConfidenceMap<f32>;
pub type ConfidenceMap64 = mocl::ConfidenceMap<f64>;
pub type Checkpoint = mocl::Checkpoint<f32>;
