//! Learning N-body dynamics with an equivariant graph network driving a
//! shared-parameter symplectic Euler integrator.
//!
//! The crate is layered bottom-up: [`tensor`] is the differentiable numeric
//! substrate, [`physics`] produces ground truth, [`egnn`] maps a particle
//! state to accelerations, [`integrator`] turns accelerations into
//! trajectories, and [`training`] / [`eval`] run the experiments.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod geometry;
pub mod physics;
pub mod egnn;
pub mod integrator;
pub mod model;
pub mod training;
pub mod eval;
