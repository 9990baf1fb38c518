//! Dense `f32` tensors with reverse-mode automatic differentiation.
//!
//! Storage is contiguous row-major with no views or strides. A [`Graph`]
//! records operations as they run; [`Graph::backward`] then fills gradient
//! buffers of every tracked node. [`ParamStore`] and [`Tape`] add named,
//! grouped parameters on top of that.

mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig, Moments};
pub use params::{Param, ParamGrads, ParamId, ParamStore, Tape};
pub use tensor::Tensor;

/// Default layernorm epsilon.
pub const LN_EPS: f32 = 1e-5;

/// Additive attention-mask value that blocks a position.
pub const MASKED: f32 = -1e9;
