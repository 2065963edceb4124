//! Asymmetry-sensitive contrastive learning engine for image-text retrieval
//! on precomputed feature matrices.
//!
//! The crate is organized along the data path:
//!
//! - [`numerics`]: dense kernels (matmul, softmax, cosine, scaled dot-product
//!   attention), Adam, and the finite-difference gradient oracle.
//! - [`datastore`]: feature records, the "ASCL" binary format plus a JSON
//!   manifest, batching, and a synthetic paired-dataset generator.
//! - [`samplegen`]: seeded noise negatives and concat/truncate positives.
//! - [`matcher`]: hierarchical cross-modal fusion and local+global scoring,
//!   with hand-written backward passes.
//! - [`loss`]: the asymmetry-sensitive contrastive objective with its
//!   alpha-gated generated negatives, and a triplet-loss baseline.
//! - [`pipeline`]: training loop, gradient checking, and the evaluation
//!   suite (recall@K, alignment/uniformity, length buckets).

pub mod datastore;
pub mod error;
pub mod loss;
pub mod matcher;
pub mod numerics;
pub mod pipeline;
pub mod samplegen;
pub mod seeding;

pub use error::{AsclError, Result};
