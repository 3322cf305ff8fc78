//! Diffeomorphic 3D image registration driven by a coordinate-network
//! velocity field, integrated with explicit Euler steps and optimized
//! coarse-to-fine.

pub mod cli;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod net;
pub mod objective;
pub mod registration;
pub mod volume;

pub use error::{Error, Result};
