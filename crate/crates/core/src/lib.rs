//! Multivariate curve resolution with an energy-based component selector.
//!
//! Spectra are modelled as non-negative combinations of components drawn
//! from a large candidate pool. A trained gate decides, per spectrum, which
//! candidates are present; training trades reconstruction error against the
//! number of components used and keeps the most parsimonious model found in
//! each band of reconstruction quality.

pub mod baselines;
pub mod constraint;
pub mod datamodel;
pub mod ebselect;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod solver;
pub mod synthgen;

pub use error::{Error, Result};
