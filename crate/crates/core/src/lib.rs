//! Derivative-based global sensitivity measures for function-valued model outputs.
//!
//! The crate combines a Karhunen–Loève expansion of the output process with
//! per-mode gradient estimates to compute functional DGSMs, upper bounds on
//! the functional total Sobol' indices, and the corresponding variance-based
//! reference values. Two PDE models (finite volumes + discrete adjoints) and a
//! compartmental ODE model (forward sensitivities) are included as drivers.

pub mod error;
pub mod grid;
pub mod distributions;
pub mod linalg;
pub mod kle;
pub mod model;
pub mod ode;
pub mod cholera;
pub mod sobol;
pub mod dgsm;
pub mod elliptic;
pub mod reduction;
pub mod io;

pub use error::{Error, Result};
pub use grid::{make_annulus_grid, make_interval_grid, make_midpoint_grid, make_simpson_grid, SpatialGrid};
pub use distributions::{poincare_constant, Marginal, ParameterSpace};
pub use kle::{
    kle_from_kernel, kle_from_samples, kle_from_separable_kernel, kle_modes_evaluate, nystrom_extend, InputFieldKLE,
    KLExpansion, ProcessEnsemble,
};
