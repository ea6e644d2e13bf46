//! Schrödinger bridges whose reference process is a jump diffusion.
//!
//! The crate discretizes a Lévy–Itô reference process on a grid and a time
//! mesh, solves the static Schrödinger system by iterative proportional
//! fitting, and lifts the static coupling to the dynamic bridge through an
//! h-transform. Closed-form and Monte Carlo estimators of the same objects
//! are provided side by side so that they can be checked against each other.
//!
//! Module map:
//! - [`model`]: coefficients, Lévy measures, grids and marginal vectors.
//! - [`sim`]: path simulation, empirical marginals and transition kernels.
//! - [`operator`]: generator, adjoint and residual diagnostics on fields.
//! - [`schrodinger`]: Sinkhorn solver, static coupling and pinned chains.
//! - [`htransform`]: h-fields, transformed coefficients, Girsanov weights.
//! - [`bridge`]: end-to-end assembly and convergence experiments.

pub mod bridge;
pub mod error;
pub mod export;
pub mod htransform;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod operator;
pub mod schrodinger;
pub mod sim;

pub use error::{Error, Result};
