//! Saliency-guided sparse gradient updates for RL fine-tuning of a toy
//! decoder-only transformer.

pub mod cli;
pub mod config;
pub mod error;
pub mod math;
pub mod model;
pub mod saliency;
pub mod perturb;
pub mod tasks;
pub mod training;

pub use config::{Overrides, RunConfig};
pub use error::{Error, Result};
