//! Spatial drift τ(t) of the inversion step.
//!
//! `τ = Ψ(x_{t−1}; ε(x_{t−1}, γ₂)) − Ψ(x_{t−1}; ε(x_t, γ₂))`: the difference
//! between inverting with noise queried at the moved point and with noise
//! queried at the anchor. For Euler (`A = 1, B = −h, C = h`) its leading
//! term is `−h² J_uc v(x, γ₁)`.

use ndarray::{Array1, ArrayView1};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampler::norm;
use crate::schedule::{NoisePoint, Schedule, ScheduleKind};
use crate::scorefield::GuidedField;
use crate::solver::{coefficients, forward_step, inverse_step, LatentState, SolverCoefficients};

/// Difference of the two inversion outcomes from `x_prev`.
pub fn tau_from_noises(
    c: &SolverCoefficients,
    x_prev: &LatentState,
    eps_moved: ArrayView1<f64>,
    eps_anchor: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let moved = inverse_step(c, x_prev, eps_moved)?;
    let anchored = inverse_step(c, x_prev, eps_anchor)?;
    Ok(moved.x - anchored.x)
}

/// τ for one explicit zigzag step from `x`, with coefficients `c` and the
/// field evaluated at `at`.
pub fn measure_tau_at<F: GuidedField + ?Sized>(
    field: &F,
    at: NoisePoint,
    c: &SolverCoefficients,
    x: &LatentState,
    gamma1: f64,
    gamma2: f64,
) -> Result<Array1<f64>> {
    let pred = field.guided(at, x.x.view(), gamma1)?;
    let x_prev = forward_step(c, x, pred.guided.view())?;
    let moved = field.guided(at, x_prev.x.view(), gamma2)?.at_scale(gamma2);
    tau_from_noises(c, &x_prev, moved.view(), pred.at_scale(gamma2).view())
}

/// τ at step `x.t` of `schedule`.
pub fn measure_tau<F: GuidedField + ?Sized>(
    field: &F,
    schedule: &Schedule,
    x: &LatentState,
    gamma1: f64,
    gamma2: f64,
) -> Result<Array1<f64>> {
    let c = coefficients(schedule, x.t)?;
    measure_tau_at(field, schedule.point(x.t), &c, x, gamma1, gamma2)
}

/// First-order prediction `C J_uc (x_{t−1} − x_t)` with
/// `x_{t−1} − x_t = (A − 1) x + B v(x, γ₁)`; equals `−h² J_uc v` for Euler.
pub fn tau_leading_order<F: GuidedField + ?Sized>(
    field: &F,
    at: NoisePoint,
    c: &SolverCoefficients,
    x: ArrayView1<f64>,
    gamma1: f64,
) -> Result<Array1<f64>> {
    let pred = field.guided(at, x, gamma1)?;
    let (j_uc, _) = field.jacobian_pair(at, x)?;
    let displacement = (c.a - 1.0) * &x + &(c.b * &pred.guided);
    Ok(c.c * j_uc.dot(&displacement))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauPoint {
    pub h: f64,
    pub tau_norm: f64,
    pub predicted_norm: f64,
    /// `‖τ − τ_pred‖ / ‖τ‖`
    pub relative_deviation: f64,
}

/// Flow-geometry sweep of one explicit step `σ → σ − h` from `x`.
pub fn tau_sweep<F: GuidedField + ?Sized>(
    field: &F,
    sigma: f64,
    x: ArrayView1<f64>,
    h_list: &[f64],
    gamma1: f64,
) -> Result<Vec<TauPoint>> {
    let at = NoisePoint::new(ScheduleKind::Flow, sigma);
    h_list
        .iter()
        .map(|&h| {
            if !(h > 0.0 && h <= sigma) {
                return Err(Error::InvalidConfig(format!(
                    "step {h} must lie in (0, sigma = {sigma}]"
                )));
            }
            let c = SolverCoefficients::flow(sigma, sigma - h, 1).validated()?;
            let state = LatentState::new(x.to_owned(), 1);
            let tau = measure_tau_at(field, at, &c, &state, gamma1, 0.0)?;
            let predicted = tau_leading_order(field, at, &c, x, gamma1)?;
            let tau_norm = norm(tau.view());
            Ok(TauPoint {
                h,
                tau_norm,
                predicted_norm: norm(predicted.view()),
                relative_deviation: norm((&tau - &predicted).view()) / tau_norm,
            })
        })
        .collect()
}
