//! Gaussian-copula variational language modelling.

pub mod config;
pub mod copula;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod lowrank;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod oracles;
pub mod rng;
pub mod special;
pub mod synthetic;
pub mod trainer;
pub mod verify;
pub mod workflow;

pub use error::{Error, Result};
