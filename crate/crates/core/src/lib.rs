//! Subject-agnostic fMRI-to-embedding decoding.
//!
//! The pipeline maps a voxel vector of any length onto a fixed grid of
//! voxel groups, extracts three global brain representations (semantic,
//! geometric, mutual), decodes coarse embeddings with cross-attention over
//! learnable queries and refines them jointly in a mutual embedder. Training
//! aligns the decoded embeddings to a frozen teacher (MSE + SoftCLIP) while a
//! subject discriminator behind a gradient reversal layer pushes the
//! extractors toward subject-invariant representations.
//!
//! Modules follow the data flow:
//! [`dataset`] → [`extractor`] → [`embedder`] → [`alignment`] → [`trainer`] → [`eval`].

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod nn;
pub mod par;
pub mod seed;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};

/// Version string written into every run directory and checkpoint.
pub const CODE_VERSION: &str = concat!("unibrain ", env!("CARGO_PKG_VERSION"));
