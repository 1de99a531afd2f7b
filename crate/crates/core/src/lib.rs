//! Multi-view hashing: gated per-view encoders fused with learned view
//! confidences, a residual expansion block and a tanh hash layer, trained on
//! a pairwise cosine-affinity loss plus a linear classification loss. Codes
//! are bit-packed and searched by Hamming distance; retrieval quality is
//! reported as mean average precision.
//!
//! Module map:
//! - [`nd`]: matrices and the reverse-mode tape
//! - [`data`]: feature files, manifests, synthetic data, splits
//! - [`model`]: parameters and the forward graph
//! - [`loss`]: affinity target and training objective
//! - [`train`]: optimisers, training loop, checkpoints, metric curves
//! - [`retrieval`]: packed codes, Hamming ranking, mAP

pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod nd;
pub mod retrieval;
pub mod train;

pub use error::{Error, Result};
