//! Affine diffusion solvers and the zigzag-sampling collapse.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: discrete VP / flow / spherical noise schedules.
//! - [`solver`]: the affine forward step `Φ(x; ε) = A x + B ε`, its exact
//!   inverse `Ψ(x; ε) = A⁻¹ x + C ε`, and the coefficient dualities.
//! - [`scorefield`]: analytic Gaussian-mixture prediction fields with
//!   closed-form Jacobians, standing in for a trained denoiser.
//! - [`sampler`]: standard CFG, explicit zigzag, implicit zigzag (exact noise
//!   reuse) and the cached-surrogate Z² sampler, with NFE accounting.
//! - [`analysis`]: spatial drift, surrogate error, order fits and the
//!   effective vector field of the collapsed sampler.

// negated comparisons reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod sampler;
pub mod schedule;
pub mod scorefield;
pub mod solver;

pub use error::{Error, Result};
pub use sampler::{
    collapsed_forward, implicit_collapse, run_trajectory, Phase, Sampler, SamplerConfig,
    SurrogateCache, TrajectoryRecord, Variant,
};
pub use schedule::{random_schedule, NoisePoint, Schedule, ScheduleKind};
pub use scorefield::{
    ConstantField, GaussianComponent, GuidedField, GuidedPrediction, Mixture, MixtureField,
};
pub use solver::{LatentState, SolverCoefficients};
