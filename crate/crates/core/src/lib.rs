//! Cross-modality metric learning toolkit.
//!
//! Trains and evaluates a dual-granularity triplet objective on desk-scale
//! two-modality data: identity-balanced PK sampling, a small two-stream
//! embedder with pooling branches and a batch-norm neck, the sample-based
//! hard-mining triplet loss and the center-based hetero-center triplet loss
//! composed with identification losses, momentum-SGD training, and CMC/mAP
//! retrieval evaluation. Every loss and gradient is checkable against
//! brute-force oracles and central finite differences.

pub mod ablation;
pub mod batchnorm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod pipeline;
pub mod pooling;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
