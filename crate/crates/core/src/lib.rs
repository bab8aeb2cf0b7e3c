//! Doped Kronecker-product (DKP) compression.
//!
//! A doped layer stores its weight matrix as
//!
//! ```text
//! W = alpha * (B ⊗ C) + beta * M_sp
//! ```
//!
//! where `B ⊗ C` is a Kronecker product of two small factors and `M_sp` is
//! an overlay that starts dense and is gradually magnitude-pruned to an
//! extreme sparsity. This crate holds the numerical core: Kronecker
//! algebra, the sparse overlay lifecycle, the doped layer with co-matrix
//! row dropout and block coordinate descent gating, a hand-differentiated
//! LSTM language model, comparison compressors and compression arithmetic.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command
//! line and experiment orchestration live in the `dkpkit` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baselines;
pub mod config;
pub mod data;
pub mod dense;
pub mod dkp;
mod error;
pub mod kron;
pub mod nn;
pub mod report;
pub mod rng;
pub mod sparse;
pub mod train;

pub use crate::dense::DenseMatrix;
pub use crate::dkp::{BcdPhase, CmrMaskDraw, DkpMode, DopedLayer};
pub use crate::error::{Error, Result};
pub use crate::kron::KronFactorPair;
pub use crate::sparse::{PruneSchedule, SparseOverlay};
