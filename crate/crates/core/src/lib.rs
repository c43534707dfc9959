//! Finite-state Fokker-Planck operators for annealing, their biorthonormal
//! spectra, exact propagation under piecewise-constant protocols, and
//! numerical checks of calculation-time bounds.
//!
//! Convention throughout: `∂ρ/∂t = -L ρ`, columns of `L` sum to zero and
//! `L[j][i] = -R(i→j)` off the diagonal.

// `!(x > 0.0)` style guards deliberately route NaN to the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod error;
pub mod evolve;
pub mod generator;
pub mod protocol;
pub mod spectral;

pub use error::{Error, Result};
