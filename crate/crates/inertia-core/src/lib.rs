//! Modelling and optimal placement of virtual inertia in low-inertia
//! power networks.
//!
//! The crate models a per-unit swing network with grid-following and
//! grid-forming virtual-inertia devices, computes the closed-loop H2 norm
//! from disturbance ports to a weighted performance output via Lyapunov
//! equations, tunes per-device inertia and damping gains by projected
//! gradient descent under budget and rating constraints, and validates
//! allocations with time-domain simulation of both the linearized and the
//! sine-coupled nonlinear model.
//!
//! Module map:
//! - [`netmodel`]: network description, operating point, linearization,
//!   nonlinear dynamics.
//! - [`devices`]: device models, gain matrices, loop closure.
//! - [`h2`]: Lyapunov solver, H2 norm, analytic gradient, impulse-energy
//!   oracle.
//! - [`optimizer`]: constraint projection, projected gradient descent,
//!   multistart.
//! - [`simlab`]: simulation, frequency-stability metrics, linearization
//!   error studies, scenario comparison.
//!
//! Batch work (multistart runs, study samples) fans out over rayon when
//! the default `parallel` feature is enabled and falls back to sequential
//! execution without it.

pub mod devices;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod h2;
pub mod linalg;
pub mod netmodel;
pub mod optimizer;
pub mod simlab;

pub use error::{Error, Result};
