//! Linear self-attention trained in context on linear regression prompts.
//!
//! The crate evaluates the network, integrates the population gradient flow,
//! computes the closed-form limits and risks, and checks them against Monte
//! Carlo estimates.

pub mod error;
pub mod linalg;
pub mod model;
pub mod sampling;
pub mod dynamics;
pub mod theory;
pub mod experiments;
pub mod cli;

pub use error::{Error, Result};
