//! Periodic Stokes corrector problems for suspensions of rigid balls on a
//! MAC grid: effective viscosity `B`, pressure coefficient `b` and the
//! two-scale error of the homogenized flow in a box.

pub mod config;
pub mod effective;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod krylov;
pub mod poisson;
pub mod raster;
pub mod runner;
pub mod stokes;
pub mod strain;
pub mod twoscale;

pub use error::{Error, Result};
