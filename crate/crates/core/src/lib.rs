//! Reconstruction of LiDAR z-coordinates lost to structured beam dropout.
//!
//! The pipeline reads (or synthesises) a frame, simulates dropout of every
//! n-th beam, builds a kNN graph over the surviving planar positions and fits
//! a fresh gated graph-attention model per frame. Classical interpolation and
//! simpler graph networks are provided as baselines, together with the
//! evaluation metrics used to compare them.

pub mod baselines;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod spatial;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
