//! Layer-wise model uncertainty for small fully-connected networks, expressed
//! as a Gaussian posterior in information (inverse-covariance) form.
//!
//! The pipeline: train a network to its MAP estimate, capture per-sample
//! activation/gradient factors, build Kronecker-factored estimates of the
//! layer Fisher information (KFAC, its eigenvalue-corrected variant, and the
//! diagonally corrected information form), sparsify the spectrum while
//! keeping the eigenbasis a Kronecker product of column subsets, and draw
//! posterior samples through a Woodbury factorization whose cubic-cost steps
//! run in the low-rank dimension `L` instead of the parameter dimension `N`.
//!
//! The crate is `no_std` (with `alloc`); IO, file formats and the CLI live in
//! the companion `infoform-cli` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod fisher;
pub mod kron;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod posterior;
pub mod sampler;
pub mod sparse;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{EigPair, Mat, SymMatrix};
