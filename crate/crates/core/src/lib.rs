//! Difference-map phase retrieval with support and Fourier-modulus
//! projections, the linearized convergence functional and its optimal
//! parameters, and random-matrix checks of the trace averages that feed it.

pub mod cli;
pub mod diffmap;
pub mod ensembles;
pub mod error;
pub mod grid;
pub mod linearized;
pub mod projections;
pub mod rmt;
pub mod spectral;

pub use error::{Error, Result};
