//! Numerical core for a semilinear stochastic heat equation with a cubic
//! bistable drift and multiplicative space-time white noise on the unit
//! interval, discretized by a splitting exponential Euler scheme in either
//! the sine eigenbasis or a piecewise-linear finite element space.
//!
//! The crate is organized around the pipeline used by the convergence
//! studies:
//!
//! - [`spectral`]: exact calculus of the Dirichlet Laplacian (eigenpairs,
//!   fractional powers, semigroup) used as the reference operator algebra.
//! - [`fem`]: uniform-mesh P1 finite element space with mass/stiffness
//!   matrices, discrete semigroup and fractional powers through the
//!   generalized eigendecomposition, and the projections onto the mesh.
//! - [`model`]: the problem-defining maps; cubic drift, its exact splitting
//!   flow, and the multiplicative diffusion operator.
//! - [`noise`]: reproducible truncated space-time white noise keyed by
//!   `(seed, trajectory, step, mode)` so results do not depend on thread
//!   scheduling.
//! - [`schemes`]: the splitting exponential Euler stepper and a semi-implicit
//!   comparison integrator.
//! - [`sensitivity`]: first/second variation equations and the Malliavin
//!   derivative evolution along a trajectory.
//! - [`harness`]: Monte Carlo convergence studies, order regression and
//!   result persistence.
//! - [`verify`]: the operator-bound and sensitivity check suites behind the
//!   `verify-ops` subcommand.

pub mod error;
pub mod fem;
pub mod harness;
pub mod model;
pub mod noise;
pub mod schemes;
pub mod sensitivity;
pub mod spectral;
pub mod transforms;
pub mod verify;

pub use error::{Error, Result};
pub use fem::{FemField, FemSpace};
pub use harness::{
    ErrorReport, ErrorRow, ObservableTag, Profile, StudyConfig, TemporalStudyConfig,
};
pub use model::{DiffusionSpec, DiffusionVariant, InitialData};
pub use noise::NoisePath;
pub use schemes::{DriftKind, Field, SchemeConfig, SchemeKind, SpaceKind};
pub use spectral::{SpectralField, SpectralOperatorDiag};
