//! Condensing short video clips into a single informative frame.
//!
//! The crate bundles everything the pipeline needs: a small differentiable
//! tensor core, a block-matching codec that yields the I-frame / motion /
//! residual representation, a procedural moving-shapes dataset, the five
//! networks and their losses, joint training, and recognition on synthetic
//! frames.

pub mod assemble;
mod bytes;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod models;
pub mod recognition;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{cosine_lr, Activation, Adam, Graph, Parameter, Real, Tensor, Var};
