//! Stochastic normalizing flows.
//!
//! Neural SDEs `dZ = μ(Z) dt + σ(Z) dB` are turned into random ODEs by
//! replacing the Brownian motion with a smooth finite-dimensional
//! approximation (Wong–Zakai) and adding the Itô-to-Stratonovich drift
//! correction. Conditional on the path, the flow is an ordinary continuous
//! normalizing flow, so log-densities follow from the instantaneous change of
//! variables and parameters can be trained by adjoint sensitivities.

pub mod ad;
pub mod density;
pub mod dynamics;
pub mod error;
pub mod nets;
pub mod paths;
pub mod rng;
pub mod solve;
pub mod targets;
pub mod train;

pub use error::{Error, Result};
