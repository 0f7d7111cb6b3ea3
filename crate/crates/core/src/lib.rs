//! Numerical toolkit for products of i.i.d. random matrices.

pub mod ensembles;
pub mod harness;
pub mod limit_law;
pub mod linearization;
pub mod quad;
pub mod spectra;
pub mod stats;
pub mod verification;
