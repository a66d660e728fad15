//! Semi-analytical pricing of one-factor short-rate models with the
//! time-dependent generalization of the GTFK effective-potential path
//! integral, plus PDE and Monte Carlo reference solvers.

pub mod error;
pub mod gtfk;
pub mod kernels;
pub mod model;
pub mod ode;
pub mod par;
pub mod pricing;
pub mod quad;
pub mod reference;

pub use error::{Error, Result};
