//! Noise-robust multi-modal dataset distillation on synthetic micro-worlds.
//!
//! The pipeline trains expert encoders on noisy image-text pairs while
//! filtering mismatched pairs, distills a handful of synthetic pairs by
//! matching expert parameter trajectories, and scores students trained on
//! the distilled pairs by retrieval recall.

pub mod dataset;
pub mod distillation;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod filtration;
pub mod losses;
pub mod pipeline;

pub use error::{Error, Result};
pub use mdw_numeric as numeric;
