//! Unified affine solver steps.
//!
//! A deterministic first-order solver moves `x_t → x_{t-1}` by
//! `Φ(x; ε) = A·x + B·ε` and inverts it by `Ψ(x; ε) = A⁻¹·x + C·ε`. The three
//! geometries below each define `C` through their own inversion formula, so
//! the dualities `A⁻¹B + C = 0` and `AC + B = 0` are a genuine cross-check
//! of the coefficient code rather than a definition.

use std::f64::consts::FRAC_PI_2;

use ndarray::{Array1, ArrayView1};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::schedule::{Schedule, ScheduleKind};

/// Absolute tolerance for the coefficient dualities.
pub const DUALITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// The step `t` of the transition `t → t-1`.
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityResiduals {
    /// `A⁻¹B + C`
    pub r1: f64,
    /// `AC + B`
    pub r2: f64,
}

impl DualityResiduals {
    pub fn max_abs(&self) -> f64 {
        self.r1.abs().max(self.r2.abs())
    }

    pub fn holds(&self) -> bool {
        self.max_abs() <= DUALITY_TOLERANCE
    }
}

impl SolverCoefficients {
    /// Unchecked triple, e.g. for fault injection.
    pub fn from_raw(a: f64, b: f64, c: f64, step: usize) -> Self {
        Self { a, b, c, step }
    }

    /// DDIM (ε-prediction) between cumulative `ᾱ_t` and `ᾱ_{t-1}`.
    ///
    /// The inverse swaps the time indices of the forward formula.
    pub fn vp(alpha_t: f64, alpha_prev: f64, step: usize) -> Self {
        let a = (alpha_prev / alpha_t).sqrt();
        let b = (1.0 - alpha_prev).sqrt() - a * (1.0 - alpha_t).sqrt();
        let a_inv = (alpha_t / alpha_prev).sqrt();
        let c = (1.0 - alpha_t).sqrt() - a_inv * (1.0 - alpha_prev).sqrt();
        Self { a, b, c, step }
    }

    /// Euler on a velocity field between `σ_t` and `σ_{t-1}`.
    pub fn flow(sigma_t: f64, sigma_prev: f64, step: usize) -> Self {
        Self {
            a: 1.0,
            b: sigma_prev - sigma_t,
            c: sigma_t - sigma_prev,
            step,
        }
    }

    /// Spherical rotation by `Δθ = θ_{t-1} − θ_t`.
    pub fn spherical(delta_theta: f64, step: usize) -> Self {
        let (sin, cos) = delta_theta.sin_cos();
        Self {
            a: cos,
            b: sin,
            c: -sin / cos,
            step,
        }
    }

    pub fn duality_residuals(&self) -> DualityResiduals {
        check_duality(self)
    }

    /// Rejects a singular or non-finite `A` and any duality violation.
    pub fn validated(self) -> Result<Self> {
        if !(self.a.is_finite() && self.b.is_finite() && self.c.is_finite()) {
            return Err(Error::DegenerateCoefficients {
                step: self.step,
                reason: format!("non-finite triple ({}, {}, {})", self.a, self.b, self.c),
            });
        }
        if self.a == 0.0 {
            return Err(Error::DegenerateCoefficients {
                step: self.step,
                reason: "A = 0 is not invertible".into(),
            });
        }
        let r = check_duality(&self);
        if !r.holds() {
            return Err(Error::DualityViolation {
                step: self.step,
                r1: r.r1,
                r2: r.r2,
            });
        }
        Ok(self)
    }
}

/// Coefficients for the transition `t → t-1` of `schedule`.
pub fn coefficients(schedule: &Schedule, t: usize) -> Result<SolverCoefficients> {
    raw_coefficients(schedule, t)?.validated()
}

/// [`coefficients`] without the duality check.
pub fn raw_coefficients(schedule: &Schedule, t: usize) -> Result<SolverCoefficients> {
    let steps = schedule.steps();
    if t == 0 || t > steps {
        return Err(Error::StepOutOfRange { step: t, steps });
    }
    let (cur, prev) = (schedule.value(t), schedule.value(t - 1));
    let coeffs = match schedule.kind() {
        ScheduleKind::Vp => SolverCoefficients::vp(cur, prev, t),
        ScheduleKind::Flow => SolverCoefficients::flow(cur, prev, t),
        ScheduleKind::Spherical => {
            let delta = prev - cur;
            if delta.abs() >= FRAC_PI_2 {
                return Err(Error::DegenerateCoefficients {
                    step: t,
                    reason: format!("|Δθ| = {} reaches pi/2", delta.abs()),
                });
            }
            SolverCoefficients::spherical(delta, t)
        }
    };
    Ok(coeffs)
}

/// Residuals of the two coefficient dualities.
pub fn check_duality(c: &SolverCoefficients) -> DualityResiduals {
    DualityResiduals {
        r1: c.b / c.a + c.c,
        r2: c.a * c.c + c.b,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentState {
    pub x: Array1<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(x: Array1<f64>, t: usize) -> Self {
        Self { x, t }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

fn check_inputs(x: &ArrayView1<f64>, eps: &ArrayView1<f64>) -> Result<()> {
    if x.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: eps.len(),
        });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("latent state"));
    }
    if !eps.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("prediction"));
    }
    Ok(())
}

/// `Φ(x_t; ε) = A·x_t + B·ε`, landing at step `t - 1`.
pub fn forward_step(
    c: &SolverCoefficients,
    x: &LatentState,
    eps: ArrayView1<f64>,
) -> Result<LatentState> {
    if x.t != c.step {
        return Err(Error::StepMismatch {
            expected: c.step,
            found: x.t,
        });
    }
    check_inputs(&x.x.view(), &eps)?;
    Ok(LatentState::new(
        c.a * &x.x + &(c.b * &eps),
        c.step - 1,
    ))
}

/// `Ψ(x_{t-1}; ε) = A⁻¹·x_{t-1} + C·ε`, landing back at step `t`.
pub fn inverse_step(
    c: &SolverCoefficients,
    x: &LatentState,
    eps: ArrayView1<f64>,
) -> Result<LatentState> {
    if x.t + 1 != c.step {
        return Err(Error::StepMismatch {
            expected: c.step - 1,
            found: x.t,
        });
    }
    if c.a == 0.0 {
        return Err(Error::DegenerateCoefficients {
            step: c.step,
            reason: "A = 0 is not invertible".into(),
        });
    }
    check_inputs(&x.x.view(), &eps)?;
    Ok(LatentState::new(&x.x / c.a + &(c.c * &eps), c.step))
}
