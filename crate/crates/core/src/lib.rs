//! Macroscopic multilane traffic flow with Logit lane assignment.
//!
//! - [`model`]: fundamental diagrams, networks, grid states.
//! - [`equilibrium`]: the lane split at a point and the implicit class flux.
//! - [`euler`], [`lagrange`]: ring-road integrators.
//! - [`estimation`]: fitting ν to detector data.
//! - [`simulation`], [`output`]: running, comparing and writing results.

pub mod equilibrium;
pub mod error;
pub mod estimation;
pub mod euler;
pub mod lagrange;
pub mod model;
pub mod output;
pub mod scenario;
pub mod simulation;

pub use error::{Error, Result};
