use thiserror::Error;

use crate::schedule::ScheduleKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("expected a {expected:?} schedule, got {found:?}")]
    KindMismatch {
        expected: ScheduleKind,
        found: ScheduleKind,
    },

    #[error("step {step} outside 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("degenerate coefficients at step {step}: {reason}")]
    DegenerateCoefficients { step: usize, reason: String },

    #[error("duality violated at step {step}: |A⁻¹B + C| = {r1:e}, |AC + B| = {r2:e}")]
    DualityViolation { step: usize, r1: f64, r2: f64 },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("state is at step {found} but the coefficients expect step {expected}")]
    StepMismatch { expected: usize, found: usize },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("unsupported conversion: {0}")]
    UnsupportedConversion(String),

    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),

    #[error("zigzag step at t={step} needs a populated surrogate cache")]
    EmptyCache { step: usize },

    #[error(
        "collapsed forward forms disagree by {deviation:e} at step {step} (AC + B = {residual:e})"
    )]
    CollapseMismatch {
        step: usize,
        deviation: f64,
        residual: f64,
    },

    #[error("order fit: {0}")]
    Fit(String),
}
