//! Kronecker-factored natural-gradient optimizers and the matrix-variate
//! Gaussian posteriors they induce.
//!
//! The crate covers the full path from Kronecker algebra to benchmark tables:
//!
//! - [`linalg`]: dense matrices, `vec`/`unvec`, Kronecker matrix-vector
//!   products and a Jacobi symmetric eigensolver.
//! - [`nn`]: fully connected ReLU networks with the per-layer caches needed
//!   for Kronecker-factored curvature.
//! - [`fisher`]: Kronecker factors `A`, `S`, their eigenbases and the
//!   eigenbasis re-scaling diagonal.
//! - [`posterior`]: eigenvalue-corrected (EMVG), Kronecker (MVG) and
//!   fully factorized (FFG) Gaussian posteriors.
//! - [`optim`]: K-FAC, EK-FAC, their noisy variational counterparts and
//!   Bayes-by-Backprop.
//! - [`bench`]: regression benchmarking with train/test splits.
//! - [`verify`]: the randomized oracle suite behind `ekfac verify`.
//! - [`cli`], [`config`]: the command-line front end.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod fisher;
pub mod fixtures;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod posterior;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Mat, SymEig};
