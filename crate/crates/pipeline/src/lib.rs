//! Data generation, staged training, checkpoints, analysis and plotting
//! around the core model.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod runner;
pub mod svg;
pub mod train;

pub use error::{PipelineError, Result};
