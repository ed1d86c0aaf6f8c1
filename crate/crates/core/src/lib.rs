//! Numerical engine for sublinear-expectation calculus in one spatial
//! dimension under volatility uncertainty.
//!
//! The crate provides two independent evaluation routes and the machinery to
//! compare them:
//!
//! - [`gpde`] / [`cylinder`]: a monotone finite-difference solver for the
//!   nonlinear heat equation plus backward nested evaluation of cylindrical
//!   payoffs, yielding expectations, conditional surfaces, and the value
//!   slabs from which hedge ratios and curvature are read.
//! - [`paths`]: volatility-controlled Monte Carlo with a counter-based
//!   generator, supplying supremum-over-controls estimators for
//!   expectations, running-maximum evaluations, capacities, and norms.
//! - [`decomp`]: extraction of the martingale decomposition
//!   `X_t = X_0 + int Z dB - K_t` along simulated paths, and the inequality
//!   verification suite built from both routes.
//!
//! [`model`] holds the shared domain vocabulary: the volatility band and its
//! generator, time partitions, series constants, and the payoff expression
//! language.

pub mod cylinder;
pub mod decomp;
pub mod error;
pub mod gpde;
pub mod model;
pub mod paths;

pub use error::{Error, Result};
