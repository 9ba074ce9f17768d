//! Machine unlearning toolkit core.
//!
//! Provides the pieces an unlearning benchmark composes:
//!
//! - [`model`]: a small Vision Transformer classifier with analytic
//!   gradients, an AdamW optimizer, and parameter freeze/reinitialize
//!   primitives.
//! - [`data`]: the five-split dataset structure (train/retain/forget/
//!   test/unseen), manifest loading, synthetic corpus generation, and
//!   seeded batch iteration.
//! - [`unlearn`]: seven unlearning algorithms behind one interface,
//!   each producing a per-epoch trajectory of checkpoints.
//! - [`eval`]: utility, membership-inference forgetting score, and the
//!   NoMUS composite metric.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod unlearn;

pub use error::{Error, Result};
