//! Backward error analysis of the implicit zigzag step on flow schedules.
//!
//! One collapsed step `x̃ = x − hγΔv`, `x' = x̃ − h v(x̃, γ)` matches an Euler
//! step of the effective field
//!
//! `v_eff = v_uc + 2γΔv − hγ J_v(γ) Δv`, with `J_v(γ) = J_u + γ(J_c − J_u)`,
//!
//! up to `O(h³)` per step. [`bea_agreement`] compares the discrete
//! trajectory with a fine RK4 integration of `dx/dσ = v_eff`.

use ndarray::{Array1, ArrayView1};
use serde::Serialize;

use crate::analysis::fit::{check_step_list, OrderFit};
use crate::analysis::sweep::Span;
use crate::error::{Error, Result};
use crate::sampler::{norm, Sampler, SamplerConfig, Variant};
use crate::schedule::{NoisePoint, ScheduleKind};
use crate::scorefield::GuidedField;

/// RK4 substeps per sampler step in the reference integration.
pub const REFERENCE_SUBSTEPS: usize = 100;

/// `v_eff(x)` at noise level `at` for step size `h`.
pub fn effective_field<F: GuidedField + ?Sized>(
    field: &F,
    at: NoisePoint,
    x: ArrayView1<f64>,
    gamma1: f64,
    h: f64,
) -> Result<Array1<f64>> {
    let pred = field.guided(at, x, gamma1)?;
    let mut v = &pred.eps_uncond + &((2.0 * gamma1) * &pred.delta_eps);
    if h != 0.0 && gamma1 != 0.0 {
        let (j_u, j_c) = field.jacobian_pair(at, x)?;
        let j_v = &j_u + &(gamma1 * &(&j_c - &j_u));
        v.scaled_add(-h * gamma1, &j_v.dot(&pred.delta_eps));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BeaPoint {
    pub h: f64,
    pub steps: usize,
    /// Terminal distance between the sampler and the RK4 flow of `v_eff`.
    pub deviation: f64,
    /// Terminal distance between the sampler and Euler steps of `v_eff`.
    pub euler_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeaSweep {
    pub points: Vec<BeaPoint>,
    pub fit: OrderFit,
    pub euler_fit: Option<OrderFit>,
}

fn check_span(span: &Span) -> Result<()> {
    if span.kind != ScheduleKind::Flow {
        return Err(Error::KindMismatch {
            expected: ScheduleKind::Flow,
            found: span.kind,
        });
    }
    Ok(())
}

fn rk4<F: GuidedField + ?Sized>(
    field: &F,
    span: &Span,
    x_start: ArrayView1<f64>,
    gamma1: f64,
    h: f64,
    substeps: usize,
) -> Result<Array1<f64>> {
    let rhs = |sigma: f64, x: ArrayView1<f64>| {
        effective_field(field, NoisePoint::new(ScheduleKind::Flow, sigma), x, gamma1, h)
    };
    let n = substeps;
    let dt = -span.length() / n as f64;
    let mut x = x_start.to_owned();
    for k in 0..n {
        let s = span.high + k as f64 * dt;
        let k1 = rhs(s, x.view())?;
        let k2 = rhs(s + 0.5 * dt, (&x + &(0.5 * dt * &k1)).view())?;
        let k3 = rhs(s + 0.5 * dt, (&x + &(0.5 * dt * &k2)).view())?;
        let k4 = rhs(s + dt, (&x + &(dt * &k3)).view())?;
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    Ok(x)
}

/// Deviations for one step size.
pub fn bea_point<F: GuidedField + ?Sized>(
    field: &F,
    span: &Span,
    h: f64,
    gamma1: f64,
    x_start: ArrayView1<f64>,
) -> Result<BeaPoint> {
    check_span(span)?;
    let schedule = span.schedule(h)?;
    let steps = schedule.steps();
    let cfg = SamplerConfig::new(Variant::ImplicitZ, gamma1).with_window(0, steps);
    let record = Sampler::new(field, &schedule, cfg)?
        .with_diagnostics(false)
        .run(x_start.to_owned())?;
    let discrete = &record.terminal().x;

    let mut euler = x_start.to_owned();
    for t in (1..=steps).rev() {
        let step = schedule.value(t) - schedule.value(t - 1);
        let v = effective_field(field, schedule.point(t), euler.view(), gamma1, step)?;
        euler.scaled_add(-step, &v);
    }

    let reference = rk4(field, span, x_start, gamma1, h, steps * REFERENCE_SUBSTEPS)?;
    Ok(BeaPoint {
        h,
        steps,
        deviation: norm((discrete - &reference).view()),
        euler_deviation: norm((discrete - &euler).view()),
    })
}

pub fn bea_points<F: GuidedField + ?Sized>(
    field: &F,
    span: &Span,
    h_list: &[f64],
    gamma1: f64,
    x_start: ArrayView1<f64>,
) -> Result<Vec<BeaPoint>> {
    check_step_list(h_list)?;
    h_list
        .iter()
        .map(|&h| bea_point(field, span, h, gamma1, x_start))
        .collect()
}

impl BeaSweep {
    pub fn from_points(points: Vec<BeaPoint>) -> Result<Self> {
        let h: Vec<f64> = points.iter().map(|p| p.h).collect();
        let dev: Vec<f64> = points.iter().map(|p| p.deviation).collect();
        let euler: Vec<f64> = points.iter().map(|p| p.euler_deviation).collect();
        let fit = OrderFit::fit_asymptotic(&h, &dev)?;
        let euler_fit = OrderFit::fit_asymptotic(&h, &euler).ok();
        Ok(Self {
            points,
            fit,
            euler_fit,
        })
    }
}

/// Sweep over `h_list` and fit the deviation order.
pub fn bea_agreement<F: GuidedField + ?Sized>(
    field: &F,
    span: &Span,
    h_list: &[f64],
    gamma1: f64,
    x_start: ArrayView1<f64>,
) -> Result<BeaSweep> {
    BeaSweep::from_points(bea_points(field, span, h_list, gamma1, x_start)?)
}
