//! Entropic multi-marginal optimal transport with Coulomb cost.

pub mod analytic;
pub mod cost;
pub mod densities;
pub mod error;
pub mod radial;
pub mod refine;
pub mod recovery;
pub mod solver;

pub use error::{Error, Result};
