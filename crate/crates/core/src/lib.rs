//! Query-by-example spoken term detection.
//!
//! A spoken query is scored against a long audio segment either by
//! subsequence dynamic time warping ([`dtw`]) or by an attention-based
//! multi-hop network ([`model`]) built on a small hand-written numerical core
//! ([`tensor`]). The network can be trained on labeled pairs or distilled from
//! DTW scores ([`train`]), and [`eval`] provides MAP, score fusion, attention
//! localization and runtime benchmarking.

pub mod dataset;
pub mod dtw;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use features::FeatureSequence;
