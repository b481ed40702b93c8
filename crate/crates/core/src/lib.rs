//! Memory-augmented Q-profile regression over shot-structured time series.
//!
//! The crate provides a small float64 tape-autodiff engine, the two-branch
//! association network built on it (shared MLP encoder, sinusoidal positional
//! encoding, multi-head Hopfield association over history and learnable
//! global tokens, dense head), a shot-structured data pipeline with a
//! synthetic corpus generator, and a deterministic SGD trainer with
//! checkpointing.

pub mod corpus;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hopfield;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::{ParamStore, Tensor};
