//! Learnable attention masks on a small, fully differentiable f64 core.
//!
//! * [`tensor`], [`graph`], [`prng`], [`optim`], [`gradcheck`]: dense tensors,
//!   tape autodiff, a reproducible generator, Adam, and a finite-difference
//!   oracle.
//! * [`lam`]: the mask network and the static learnable mask.
//! * [`attention`]: multi-head attention with multiply/add mask fusion.
//! * [`encoder`]: a pre-norm transformer encoder wiring masks per strategy.

pub mod attention;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod lam;
pub mod module;
pub mod optim;
pub mod prng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
