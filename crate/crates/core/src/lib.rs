//! Federated mutual knowledge distillation with dynamic SVD gradient
//! compression, simulated in-process with byte-exact communication
//! accounting.

pub mod compress;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod numerics;

pub use error::{Error, Result};
