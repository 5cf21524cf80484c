//! Heat equations with dynamic (Wentzell) boundary conditions: simulation,
//! duality-based null controls, Carleman weight diagnostics and semilinear
//! fixed-point control on small polar and interval grids.

// `!(x > 0.0)` is used on purpose so that NaN parameters are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod carleman;
pub mod cli;
pub mod config;
pub mod control;
pub mod error;
pub mod evolution;
pub mod fields;
pub mod geometry;
pub mod observability;
pub mod operators;
pub mod semilinear;
pub mod sparse;
pub mod verify;

pub use error::{Error, Result};
