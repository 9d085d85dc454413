//! Multiscale P_N radiative-transfer solvers.
//!
//! Implicit-explicit finite-volume schemes for the linear transport equation
//! and the nonlinear gray model, with the stiff low-order-in-epsilon terms
//! implicit so a single time-step rule covers both the kinetic and the
//! diffusive regime. Companion pieces: reference solvers for the diffusion
//! limit, a Von Neumann stability analyzer for the linear scheme, and a
//! benchmark harness.

pub mod error;
pub mod bench;
pub mod config;
pub mod diffusion;
pub mod flux;
pub mod fourier;
pub mod linsys;
pub mod mesh;
pub mod moment;
pub mod poly;
pub mod gray;
pub mod linear;
pub mod recon;
mod scheme;

pub use diffusion::{LimitField, LimitMode};
pub use error::{Result, SolverError};
pub use mesh::{BoundaryKind, BoundarySpec, Grid, MaterialState, MomentField, PhysConsts};
pub use moment::{build_system_1d, build_system_2d, Dimension, MomentSystem};
