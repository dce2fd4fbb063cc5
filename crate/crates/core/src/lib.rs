//! Speaker diarization with x-vector embeddings.
//!
//! The pipeline runs MFCC features through a (factorized) TDNN embedding
//! network, optionally pooling statistics from several frame-level layers,
//! then post-processes embeddings with length normalization, PCA whitening
//! and a per-conversation PCA before PLDA scoring and average-linkage
//! agglomerative clustering. A collar-aware DER scorer closes the loop, and
//! a synthetic corpus generator makes every stage runnable at desk scale.

pub mod backend;
pub mod clustering;
mod container;
pub mod der;
pub mod error;
pub mod features;
pub mod network;
pub mod pipeline;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
