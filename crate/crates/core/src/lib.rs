//! Risk-sensitive iterative LQG for nonlinear systems observed through noisy
//! measurements.
//!
//! Planning ([`planner::solve`]) iterates a risk-sensitive backward pass
//! ([`backward::backward_pass`]) with a line search on the approximated
//! exponential-of-quadratic cost ([`risk_cost::evaluate_risk_cost`]). At run
//! time a stress filter ([`filter::StressController`]) turns measurements into
//! the minimum-stress state estimate that feeds the feedback law. A
//! risk-neutral iLQG planner and Kalman filter ([`baseline`]) serve as the
//! reference, [`hopper`] provides the one-legged hopper benchmark and
//! [`harness`] runs Monte-Carlo comparisons.

pub mod backward;
pub mod baseline;
pub mod config;
pub mod error;
pub mod filter;
pub mod harness;
pub mod hopper;
pub mod linalg;
pub mod model;
pub mod oracles;
pub mod planner;
pub mod risk_cost;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
