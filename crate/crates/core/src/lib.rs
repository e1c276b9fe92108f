//! Amortized simulation-based inference with a structured (unit Gaussian)
//! summary space, and test-time detection of model misspecification through a
//! kernel MMD hypothesis test on summary statistics.

pub mod amortizer;
pub mod autodiff;
pub mod config;
pub mod diagnose;
pub mod dist;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod mmd;
pub mod nn;
pub mod rng;
pub mod scan;
pub mod simulators;
pub mod summary;
pub mod tensor;
pub mod train;
pub mod workflow;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
