//! Exit rates of linear stochastic systems under multi-channel feedback.
//!
//! The plant `dx = (A + sum_i B_i K_i) x dt + sqrt(eps) sigma dW` is analyzed
//! through four estimators of how fast it leaves a bounded domain: Monte Carlo
//! survival ([`mc`]), minimal action per unit time ([`action`]), the principal
//! Dirichlet eigenvalue of the generator ([`generator`]) and the invariance
//! kernel of the noise-free flow ([`invariant`]). [`game`] treats the gains as
//! the strategies of players who each minimize the exit rate.

pub mod action;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod generator;
pub mod invariant;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod output;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
