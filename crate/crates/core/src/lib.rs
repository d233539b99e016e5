//! Multirate time integration of two advection–diffusion subdomains coupled
//! through generalized Robin conditions on a shared interface.
//!
//! Each subdomain is advanced by a discontinuous-Galerkin-in-time (DGiT)
//! substep method with its own step size. Substeps are grouped into coupling
//! windows; on each window the interface traces are projected onto a single
//! polynomial in time, the interface fluxes are formed from those projections,
//! and the whole window is solved monolithically.
//!
//! Module map:
//! - [`timepoly`]: Legendre bases, Gauss rules, L² projections, side-condition (`D̃`, J) machinery
//! - [`mesh`]: structured meshes of the two subdomains and interface matching
//! - [`fespace`]: finite element operators and problem data
//! - [`dgit`]: single-substep DGiT blocks, including the Crank–Nicolson form
//! - [`coupling`]: coupling-window assembly, solvers and discrete property checks
//! - [`verify`]: manufactured solutions, reference solves, error norms, convergence studies
//! - [`config`]: JSON run configuration and the experiment driver behind the CLI

pub mod config;
pub mod coupling;
pub mod dgit;
pub mod error;
pub mod fespace;
pub mod linalg;
pub mod mesh;
pub mod timepoly;
pub mod verify;

pub use error::{Error, Result, SolverError};
