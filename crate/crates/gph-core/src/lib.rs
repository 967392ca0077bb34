//! Simulation and verification of truncated Gross-Pitaevskii hierarchies on a
//! periodic grid.

pub mod appendix;
pub mod boardgame;
pub mod contraction;
pub mod engine;
pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod nls;
pub mod norms;
pub mod quad;
pub mod reduced;
pub mod state;
pub mod transforms;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{GphError, Result};
pub use num_complex::Complex64 as C64;
