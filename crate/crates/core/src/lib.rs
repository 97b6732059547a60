//! Distractor-aware event-camera tracking, end to end: event-stream
//! ingestion and aggregation, a small reverse-mode tensor core, the Siamese
//! transformer tracker, a deterministic synthetic event-scene simulator,
//! training, and one-pass evaluation.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`],
//! `f32` or `f64`); the aliases at the crate root pin `f64`, which the
//! training pipeline, checkpoints and tolerance-based tests use throughout.

pub mod error;
pub mod eval;
pub mod event;
pub mod grid;
pub mod learn;
pub mod model;
pub mod scalar;
pub mod sim;
pub mod tensor;

/// Default-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision single-channel grid.
pub type Grid = grid::Grid<f64>;
/// Default-precision channel-major volume.
pub type Volume = grid::Volume<f64>;
/// Single-precision variants.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Grid32 = grid::Grid<f32>;
pub type Volume32 = grid::Volume<f32>;
