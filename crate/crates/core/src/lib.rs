//! Monte Carlo model of breakdown-flash photoemission from passively
//! quenched single-photon avalanche detectors, with the analysis chain
//! needed to turn simulated event streams into coincidence histograms,
//! emission spectra, and a single-mode leakage audit.

// `!(x > 0.0)` rejects NaN along with nonpositive values; `x <= 0.0` lets
// NaN through, so the negated form is intentional in validation paths.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod circuit;
pub mod cli;
pub mod config;
pub mod emission;
pub mod error;
pub mod io;
pub mod leakage;
mod math;
pub mod sim;
pub mod spectrum;
pub mod timing;
