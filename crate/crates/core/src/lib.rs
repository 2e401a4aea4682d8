//! Bayesian flow networks for marked temporal point processes.

pub mod checkpoint;
pub mod config;
pub mod continuous;
pub mod data;
pub mod discrete;
pub mod encoder;
pub mod error;
pub mod hawkes;
pub mod joint;
pub mod math;
pub mod metrics;
pub mod model;
pub mod psi;
pub mod sample;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
