//! Layer-integrated conditioning for a flow-matching generator, trained with
//! flow matching and refined with group-relative RL under a layer-wise
//! perturbation controller.
//!
//! The pieces, bottom up:
//! - [`vlm`]: a frozen prompt transformer whose learnable queries are read
//!   out after every block;
//! - [`lim`]: a shared encoder + layernorm per layer, mean-fused into one
//!   condition;
//! - [`denoiser`] and [`flow`]: a cross-attention velocity network with
//!   flow-matching loss, ODE and SDE samplers;
//! - [`rewards`], [`grpo`], [`ldam`]: toy rewards, the policy update and the
//!   controller that perturbs reward-specific layers;
//! - [`analysis`]: layer sweeps, similarity matrices and region ablations.

pub mod analysis;
pub mod denoiser;
mod error;
pub mod flow;
pub mod grpo;
pub mod ldam;
pub mod lim;
pub mod model;
pub mod nn;
pub mod rewards;
mod rng;
pub mod toy;
pub mod vlm;

pub use error::{Error, Result};
pub use model::{LayerSelection, ModelConfig, ModelPolicy, ParaUniModel};
pub use rng::{derive_seed, rng_from};
