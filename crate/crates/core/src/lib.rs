//! Gradient-guided loss masking for sequence-to-sequence training.
//!
//! Training units (whole sentence pairs or single target tokens) whose loss
//! gradient points away from the gradient of a small clean set are dropped
//! from the objective at each step.

pub mod align;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
