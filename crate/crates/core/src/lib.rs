//! Quantum belief propagation for thermal states of local spin Hamiltonians.
//!
//! The crate is organized bottom-up:
//!
//! * [`operator`] dense operator algebra (exp/log, ⊙-product, partial traces,
//!   cumulants, entropies),
//! * [`models`] transverse-field Ising chains and Cayley-tree glasses,
//! * [`chain`] sliding-window BP on chains with the cumulant error estimate,
//! * [`tree`] BP on the Cayley tree and quench averages,
//! * [`mera`] ternary entanglement renormalization,
//! * [`cgbp`] coarse-grained BP across renormalization levels,
//! * [`oracle`] exact references used for validation.

pub mod cgbp;
pub mod chain;
pub mod error;
pub mod linalg;
pub mod mera;
pub mod models;
pub mod operator;
pub mod oracle;
pub mod tree;

pub use error::{Error, Result};
pub use operator::{Operator, Site};
