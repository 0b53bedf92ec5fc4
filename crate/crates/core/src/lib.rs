//! Prediction power of stochastic predictors in finite-horizon optimal control.
//!
//! The crate is organised bottom-up:
//!
//! * [`lqr`] holds the time-varying LQR machinery (Riccati recursion, optimal
//!   predictive feedforward, closed-form prediction power).
//! * [`predictors`] defines the predictor families, their joint laws with the
//!   disturbances, and reproducible instance sampling.
//! * [`rollout`] simulates policies, estimates costs by Monte Carlo and holds the
//!   certainty-equivalent planner and the MPC counterexample.
//! * [`estimation`] implements the regression-based power estimator.
//! * [`policy_opt`] runs online gradient tuning of linear predictive policies.
//! * [`bounds`] checks the lower bounds for general convex costs.

pub mod bounds;
pub mod convex;
pub mod error;
pub mod estimation;
pub mod gaussian;
pub mod io;
pub mod linalg;
pub mod lqr;
pub mod policy_opt;
pub mod predictors;
pub mod presets;
pub mod rng;
pub mod rollout;

pub use error::{Error, Result};
pub use lqr::{riccati_backward, LtvSystem, RiccatiSolution};
pub use predictors::{History, PredictorKind, PredictorModel, ProblemInstance};
