//! Training-free safety editing for contrastive dual encoders.
//!
//! The crate localizes the weights of a toy CLIP-style dual encoder that are
//! most involved in processing unsafe content, manipulates them by scaling,
//! and measures the effect with preference- and retrieval-based safety
//! metrics. Everything is deterministic: given the same seeds and inputs,
//! every score table, mask, and report is byte-identical.
//!
//! Module map:
//!
//! - [`tensorio`]: the `.uwt` binary container for named f32 tensors.
//! - [`encoder`]: the dual-encoder model, activation capture, backprop.
//! - [`calibration`]: safe/unsafe tuple datasets and calibration sampling.
//! - [`flowscore`]: activation-flow saliency and safe/unsafe score ratios.
//! - [`surgeon`]: weight selection (adaptive / top-k) and the alpha-scaling edit.
//! - [`gradbase`]: gradient-magnitude pruning baselines.
//! - [`safeground`]: the metric suite and report emission.
//! - [`synthbench`]: synthetic worlds with planted unsafe pathways.

// Indexed loops mirror the matrix arithmetic throughout; iterator rewrites
// obscure the row/column structure.
#![allow(clippy::needless_range_loop)]

pub mod calibration;
pub mod encoder;
mod error;
pub mod flowscore;
pub mod gradbase;
pub mod mat;
pub mod safeground;
pub mod surgeon;
pub mod synthbench;
pub mod tensorio;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
