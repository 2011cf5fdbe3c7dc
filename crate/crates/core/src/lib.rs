//! Data-driven predictive control for a mixed-traffic platoon.
//!
//! The pipeline: simulate a nonlinear car-following platoon
//! ([`traffic`]), collect excitation data, arrange it into block-Hankel
//! trajectory libraries ([`hankel`]), refine the library into a
//! dictionary-free linear representation by alternating projections
//! ([`koopman`]), and close the loop with a constrained receding-horizon
//! controller ([`control`]). The [`experiments`] module wires these into
//! reproducible wave-mitigation and velocity-tracking scenarios behind a
//! CLI.

pub mod control;
pub mod error;
pub mod experiments;
pub mod hankel;
pub mod koopman;
pub mod numerics;
pub mod traffic;

pub use error::{Error, Result};
