//! Predictor-feedback synthesis for Itô systems with multiple input delays.
//!
//! The crate solves the delay-modified Riccati equations (finite horizon,
//! discounted and algebraic), turns their gains into a predictor controller
//! acting on the conditional expectation of the reduced state, and checks
//! the closed loop by Euler–Maruyama Monte Carlo and by an exact discrete
//! augmented-state LQ recursion.

pub mod linalg;
pub mod model;
pub mod oracle;
pub mod predictor;
pub mod riccati;
pub mod sim;

pub use linalg::Matrix;
pub use model::{Channel, CostSpec, DerivedMaps, DiscountSpec, StochasticDelaySystem, TimeGrid};
