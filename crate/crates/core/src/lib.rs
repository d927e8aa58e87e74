//! Few-shot image similarity over multi-layer backbone feature maps.
//!
//! The pipeline, per support/query pair and per backbone layer:
//!
//! 1. adaptive-pool both maps to a small `pooled × pooled` grid ([`tensor`]),
//! 2. cross-correlate the pooled pixels and derive softmax attention weights
//!    that reweight both maps ([`lwe`]),
//! 3. align query pixels to support pixels with an exact assignment solver and
//!    refine the aligned pixels with a residual bottleneck matcher ([`spm`]),
//! 4. combine a top-k aligned-pixel cosine score with a global mean-embedding
//!    cosine ([`scoring`]).
//!
//! [`pipeline`] wires the stages together, [`harness`] runs N-way K-shot
//! episodes over a [`bank::FeatureBank`], and [`training`] fits the matcher and
//! an auxiliary classifier with exact reverse-mode gradients.

pub mod bank;
pub mod error;
pub mod harness;
pub mod lwe;
pub mod pipeline;
pub mod scoring;
pub mod spm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
