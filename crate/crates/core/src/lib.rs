//! Linear-quadratic mean-field games between one major agent and several
//! types of minor agents whose controls live in convex sets.
//!
//! The crate computes decentralized projection-based strategies by solving
//! the conditional mean-field forward-backward consistency system with a
//! particle/regression Picard scheme, checks the available well-posedness
//! conditions, and measures finite-population Nash gaps by simulation.

pub mod cli;
pub mod config;
pub mod convex;
pub mod error;
pub mod linalg;
pub mod lsq;
pub mod model;
pub mod nashlab;
pub mod paths;
pub mod solver;
pub mod wellposed;

pub use error::{Error, Result};
