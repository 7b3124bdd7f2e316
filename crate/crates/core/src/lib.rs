//! uplab: a laboratory for pre-training small autoregressive models on
//! structured random data.
//!
//! The pipeline: pass noise through freshly initialized sequence models to
//! produce structured token streams, pre-train a small transformer on the
//! stream, and evaluate it zero-shot against in-context Markov baselines on
//! synthetic and real byte corpora. An exact enumeration suite verifies the
//! mixture/domination theory the generation scheme is built on.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lstm;
pub mod markov;
pub mod model;
pub mod ops;
pub mod rng;
pub mod sources;
pub mod tape;
pub mod train;
pub mod theory;

pub use error::{Error, Result};
