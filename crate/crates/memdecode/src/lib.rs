//! Neural memory decoding from EEG traces.
//!
//! The pipeline mirrors the system end to end: raw multichannel EEG traces
//! are preprocessed and cut into quality-filtered segments, a 1D
//! convolutional encoder trained with supervised contrastive loss maps each
//! segment to a 32-dimensional embedding, a KNN classifier predicts a
//! concept distribution per segment, and a soft-voting ensemble classifies
//! whole traces. An evaluation harness runs randomized trials with bootstrap
//! confidence intervals and channel/band ablations, and a retrieval layer
//! indexes documents by recollection traces. A synthetic EEG generator with
//! controllable concept separability makes everything testable at desk
//! scale.
//!
//! Core math is generic over the scalar type (`f32`/`f64`); the aliases
//! below fix the default `f64` instantiation used by the CLI.

pub mod classify;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod iforest;
pub mod neuralcore;
pub mod preprocess;
pub mod retrieval;
pub mod scalar;
pub mod segmentation;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type used by the CLI and the acceptance suite.
pub type Real = f64;

pub type RawTrace = dataset::RawTrace<Real>;
pub type CleanTrace = preprocess::CleanTrace<Real>;
pub type Segment = segmentation::Segment<Real>;
pub type SegmentSet = segmentation::SegmentSet<Real>;
