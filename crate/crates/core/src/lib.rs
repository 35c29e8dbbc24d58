//! Coupled stochastic Lagrangian flows on the flat torus `T = [0, 2π)²`.
//!
//! Two flows started from different diffeomorphisms are driven by the same
//! spectral noise; the crate simulates them and audits the distance and
//! rotation processes against their closed-form coefficients.

pub mod config;
pub mod error;
pub mod export;
pub mod flow;
pub mod metrics;
pub mod rotation;
pub mod scenario;
pub mod spectrum;
pub mod verify;

pub use error::{Error, Result};
