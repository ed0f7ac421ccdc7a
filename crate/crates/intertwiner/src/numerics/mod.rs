//! Dense real-matrix kernel and the crate's single randomness source.
//!
//! Everything downstream builds on these: row-major `Matrix` with
//! deterministic reduction order, LU inversion, Gram–Schmidt
//! orthonormalization, one-sided Jacobi singular values, and the seeded
//! SplitMix64 `Rng`. Types are immutable values after construction and all
//! operations are pure functions.

pub mod linalg;
pub mod matrix;
pub mod rng;

pub use linalg::{lu_inverse, nuclear_norm, qr_orthonormalize, singular_values};
pub use matrix::{vec_max_diff, Matrix};
pub use rng::Rng;
