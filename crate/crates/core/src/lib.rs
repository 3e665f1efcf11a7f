//! Graph collaborative filtering with a supervised graph contrastive objective.
//!
//! The crate is organised as a pipeline:
//!
//! - [`dataset`]: raw interaction ingestion, k-core filtering, seeded splits and the binary cache.
//! - [`propagation`]: the symmetric-normalised bipartite operator, light graph convolution,
//!   layer combination and its exact adjoint.
//! - [`objectives`]: BPR, in-batch InfoNCE, the joint SSLRec objective and the supervised
//!   graph contrastive (SGCL) objective, each with analytic gradients.
//! - [`augmentation`]: node-level and edge-level mixup of positive pairs.
//! - [`trainer`]: epochs, batching, negative sampling, Adam and early stopping.
//! - [`evaluator`]: full-ranking Recall@K / NDCG@K and embedding diagnostics.
//! - [`cli`]: the `mixsgcl` command line.

pub mod augmentation;
pub mod cli;
pub mod dataset;
pub mod embedding_io;
pub mod error;
pub mod evaluator;
pub mod objectives;
pub mod propagation;
pub mod trainer;

pub use error::{Error, Result};
