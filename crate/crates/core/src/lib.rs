//! Two-party vertical federated learning simulator.

pub mod attack;
pub mod data;
pub mod checkpoint;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod genmodel;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Result, VflError};
pub use tensor::Tensor;
