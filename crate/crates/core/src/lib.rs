//! Numerical laboratory for Sobolev norm growth in time-periodic
//! perturbations of Morse-Smale transport equations on the torus.

pub mod cli;
pub mod error;
pub mod escape;
pub mod fields;
pub mod io;
pub mod msanalysis;
pub mod normalform;
pub mod quantize;
pub mod solver;

pub use error::{Error, Result};
