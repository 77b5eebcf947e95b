//! Configuration-space signed distance fields for manipulators: geometric
//! oracles, dataset generation, a learned field, safe trajectory optimization
//! and MPC.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod field;
pub mod fields;
pub mod geometry;
pub mod mpc;
pub mod neighbor;
pub mod robot;
pub mod traj;

pub use error::{Error, Result};
