//! Graph adapter fine-tuning over frozen multi-modal token features.
//!
//! Pipeline: [`fixtures`] supplies per-sample image/text tokens, [`graph`]
//! links tokens whose cosine similarity exceeds a threshold, [`adapter`]
//! runs the bottleneck GCN adapter over that graph, [`continual`] adds the
//! elastic weight consolidation penalty, and [`trainer`] drives Adam with a
//! cosine schedule. [`cli`] exposes each stage as a subcommand.

pub mod adapter;
mod binio;
pub mod cli;
pub mod continual;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod nn;
pub mod rng;
mod tensor;
pub mod trainer;

pub use binio::write_atomic;
pub use error::{Error, Result};
pub use tensor::Tensor2;
