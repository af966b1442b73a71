//! Optimal execution and statistical arbitrage for a basket of assets whose
//! prices follow a multivariate Ornstein-Uhlenbeck process.
//!
//! The value function of the CARA execution problem is quadratic in inventory
//! and price; its coefficients solve a backward matrix Riccati system which
//! [`riccati`] integrates. [`closed_form`] holds the Brownian (`R = 0`) and
//! frictionless (Merton) solutions, [`estimation`] fits the price model from
//! bars, [`simulation`] rolls strategies forward and [`strategy`] turns
//! solutions into trading rates.

pub mod closed_form;
pub mod error;
pub mod estimation;
pub mod io;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod simulation;
pub mod strategy;

pub use error::{Error, Result};
pub use model::{ExecutionSpec, ExecutionState, MarketPath, OuParams, TimeGrid};
