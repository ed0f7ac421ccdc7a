//! Weight-space symmetries of neural-network nonlinearities, end to end:
//! the symmetry group attached to each activation, its action on network
//! weights (provably preserving the realized function), dissimilarity
//! metrics for hidden representations that quotient by those symmetries,
//! and constrained stitching layers trained over a doubly-stochastic
//! relaxation of the permutations.
//!
//! Start with the runnable programs in `examples/`; each one demonstrates a
//! major capability. The `itw` binary wraps the same operations behind a
//! small file-based command-line interface.

pub mod cli;
pub mod error;
pub mod intertwiner;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod stitching;
pub mod trainer;

pub use error::{Error, Result};
