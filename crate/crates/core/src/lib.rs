//! Monte Carlo laboratory for the pathwise flux of transient diffusions across
//! hypersurfaces.
//!
//! Diffusions `dX = b(t, X) dt + dW` are simulated by Euler–Maruyama and
//! streamed through crossing-count observers; the resulting means are checked
//! against surface integrals of `ρ v·n` (the current velocity `v`) computed by
//! quadrature for Gaussian models with closed-form laws.

pub mod engine;
pub mod error;
pub mod flux;
pub mod geometry;
pub mod model;
pub mod observers;
pub mod quadrature;
pub mod runner;
pub mod stats;
pub mod vector;

pub use error::{Error, Result};
