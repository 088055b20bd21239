//! Numeric substrate: matrices, seeded random streams and ULP utilities.

pub mod matrix;
pub mod rng;
pub mod ulp;

pub use matrix::{Element, Matrix};
pub use rng::{derive_seed, Draw, RngStream};
pub use ulp::{ulp, FloatFormat};
