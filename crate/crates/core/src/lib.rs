//! Keyless joins over learned record embeddings.
//!
//! Records from a base and an auxiliary dataset are serialized into
//! sentences, embedded by a trainable encoder and joined by exact k-NN
//! retrieval. Lexical baselines, samplers, a synthetic fuzzy-join workload
//! and evaluation metrics are included.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod joiner;
pub mod joinspec;
pub mod lexrank;
pub mod model;
pub mod prepare;
pub mod supervise;

pub use error::{Error, Result};
