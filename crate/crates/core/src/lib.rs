//! GRU session-based next-item recommendation.
//!
//! The pipeline: [`dataset`] turns click logs into prefix examples,
//! [`model`] holds the embedding + GRU network with its two output heads,
//! [`training`] drives cross-entropy, fine-tuning, distillation and
//! cosine-embedding runs, and [`evaluation`] scores models and baselines
//! with Recall@k / MRR@k.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
