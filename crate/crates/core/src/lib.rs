//! Feedback laws that steer a distribution of initial states onto a target
//! distribution through a linear control system `dX = (AX + Bu) dt + ε B dW`.
//!
//! The crate builds pinned stochastic bridges of the system, regresses their
//! controls onto `(t, x)` either in closed form (Gaussian-mixture endpoints) or
//! with a residual MLP, and simulates the resulting closed loop.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod bridge;
pub mod commands;
pub mod config;
pub mod distributions;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod mixture_law;
pub mod mlp;
pub mod rng;
pub mod rollout;
pub mod samples;
pub mod systems;
pub mod trainer;

pub use error::{Error, Result};
