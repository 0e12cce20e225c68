//! Numerical library for the 1D stochastic heat equation with multiplicative
//! space-time white noise on `[0, 1]` with Dirichlet boundary conditions.
//!
//! The spatial discretization is the standard three-point finite-difference
//! Laplacian; time stepping uses the stochastic exponential integrator, with
//! semi-implicit Euler-Maruyama and Crank-Nicolson-Maruyama as comparison
//! schemes. The [`experiments`] module holds the Monte Carlo harnesses
//! (strong order, work-precision, pathwise convergence, moment and Hölder
//! checks) and [`io`] the configuration and output formats used by the
//! `stochheat` command-line tool.

pub mod error;
pub mod experiments;
pub mod green;
pub mod grid;
pub mod io;
pub mod noise;
pub mod problem;
pub mod schemes;

pub use error::{Error, Result};
