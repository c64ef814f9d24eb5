//! Deductive coding of open-ended survey responses with text embeddings.
//!
//! Researchers pick a handful of exemplar responses per category; the mean of
//! their embeddings becomes the category centroid and every other response is
//! assigned to its nearest centroid by cosine similarity. Around that core the
//! crate provides agreement metrics against human codes, a pairwise
//! consistency audit of coded data, a contrastively trained linear adapter
//! for reshaping the embedding space, and 2-D projections for inspection.

pub mod adapter;
pub mod audit;
pub mod classifier;
pub mod corpus;
pub mod embedder;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod projection;
pub mod synthetic;
pub mod vecmath;

pub use error::{Error, ErrorKind, Result};
pub use vecmath::EmbeddingVector;
