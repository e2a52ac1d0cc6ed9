//! GRAC atomistic/continuum coupling on a 2D triangular lattice, with a
//! computable stress tensor, residual a posteriori estimators and an
//! adaptive refinement loop.

pub mod adapt;
pub mod error;
pub mod estimate;
pub mod experiment;
pub mod geometry;
pub mod grac;
pub mod lattice;
pub mod lp;
pub mod mesh;
pub mod model;
pub mod potential;
pub mod solver;
pub mod stress;
pub mod verify;

pub use error::{Error, Result};
