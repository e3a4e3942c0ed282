//! Semantic-ID augmentation for dual-tower collaborative filtering.
//!
//! The pipeline runs in stages:
//!
//! 1. [`data`]: load, binarize and chronologically split an interaction log.
//! 2. [`pretrain`]: a feature-only dual tower produces representation
//!    embeddings for users and items.
//! 3. [`quantizer`]: a decomposed quantizer turns each representation into a
//!    semantic ID, one codeword per variance-balanced SVD block.
//! 4. [`index`]: quantized representations answer explicit and latent
//!    pattern-neighbor queries.
//! 5. [`recommender`]: a dual-tower BPR model consumes IDs, semantic IDs,
//!    recent sequences and pattern neighbors.
//! 6. [`eval`] and [`pipeline`]: in-batch Recall/NDCG and orchestration.

pub mod checkpoint;
pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod index;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod quantizer;
pub mod recommender;
pub mod synthetic;

pub use error::{Error, Result};
