//! Building blocks for adversarial multiple-choice image-caption datasets:
//! corpus handling, paragraph-vector caption embeddings, neighborhood
//! search, decoy scoring and mining, linear baselines and metrics.

pub mod baselines;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod pvembed;
pub mod scoring;
pub mod simsearch;
pub mod table;

pub use error::{Error, Result};
