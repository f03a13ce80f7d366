//! Dense matrices, the SVD kernel and seeded randomness.

mod matrix;
mod rng;
mod svd;

pub use matrix::{frobenius_norm, matmul, Matrix};
pub use matrix::dot;
pub use rng::Rng;
pub use svd::{svd, SvdResult, SIGMA_CLAMP};
