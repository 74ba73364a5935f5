//! Step-size sweeps for the temporal surrogate.
//!
//! For each `h` the Z² sampler runs over a fixed span with one warmup step
//! and every remaining step in the zigzag phase. At each zigzag step two
//! quantities are recorded:
//!
//! - surrogate error `E_TSS = ‖Δε^t(x_t) − Δε_cached‖`, expected `O(h)`;
//! - local truncation error: distance between the Z² step and the same step
//!   taken with the exact `Δε^t(x_t)`, expected `O(h²)`.
//!
//! The per-`h` value is the median over zigzag steps.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::analysis::fit::{check_step_list, OrderFit};
use crate::error::{Error, Result};
use crate::sampler::{norm, translate, Phase, Sampler, SamplerConfig, SurrogateCache, Variant};
use crate::schedule::{Schedule, ScheduleKind};
use crate::scorefield::GuidedField;
use crate::solver::{coefficients, forward_step, LatentState};

/// A fixed interval of the schedule parameter, discretised uniformly with
/// step `h`: `σ` for flow, `θ` for VP and spherical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub kind: ScheduleKind,
    pub low: f64,
    pub high: f64,
}

impl Span {
    pub fn new(kind: ScheduleKind, low: f64, high: f64) -> Self {
        Self { kind, low, high }
    }

    pub fn length(&self) -> f64 {
        self.high - self.low
    }

    /// Number of steps of size `h`; `h` must divide the span.
    pub fn steps_for(&self, h: f64) -> Result<usize> {
        let n = self.length() / h;
        let rounded = n.round();
        if !(h > 0.0) || rounded < 1.0 || (n - rounded).abs() > 1e-6 * rounded.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "step {h} does not divide the span [{}, {}]",
                self.low, self.high
            )));
        }
        Ok(rounded as usize)
    }

    pub fn schedule(&self, h: f64) -> Result<Schedule> {
        let steps = self.steps_for(h)?;
        match self.kind {
            ScheduleKind::Flow => Schedule::flow_range(steps, self.low, self.high),
            kind => Schedule::uniform_angle(kind, steps, self.low, self.high),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub h: f64,
    pub steps: usize,
    pub median_e_tss: f64,
    pub median_lte: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `‖Δε^t(x_t) − Δε^{t+1}(x̃_{t+1})‖`.
pub fn measure_e_tss<F: GuidedField + ?Sized>(
    field: &F,
    schedule: &Schedule,
    x_t: &LatentState,
    x_tilde_prev: &LatentState,
) -> Result<f64> {
    if x_tilde_prev.t != x_t.t + 1 {
        return Err(Error::StepMismatch {
            expected: x_t.t + 1,
            found: x_tilde_prev.t,
        });
    }
    let now = field.guided(schedule.point(x_t.t), x_t.x.view(), 1.0)?;
    let cached = field.guided(schedule.point(x_tilde_prev.t), x_tilde_prev.x.view(), 1.0)?;
    Ok(norm((&now.delta_eps - &cached.delta_eps).view()))
}

/// Surrogate error and LTE medians for one step size.
///
/// With `exact_surrogate` the cache is overwritten by the exact `Δε^t(x_t)`
/// before every zigzag step; both measurements then vanish identically.
pub fn surrogate_sweep_point<F: GuidedField + ?Sized>(
    field: &F,
    span: &Span,
    h: f64,
    gamma1: f64,
    x_start: ArrayView1<f64>,
    exact_surrogate: bool,
) -> Result<SweepPoint> {
    let schedule = span.schedule(h)?;
    let steps = schedule.steps();
    if steps < 2 {
        return Err(Error::InvalidConfig(format!(
            "step {h} leaves no zigzag steps in the span"
        )));
    }
    let cfg = SamplerConfig::new(Variant::ZSquared, gamma1).with_window(1, steps - 1);
    let mut sampler = Sampler::new(field, &schedule, cfg)?.with_diagnostics(false);
    let (first, mut cache) =
        sampler.z2_step(&LatentState::new(x_start.to_owned(), steps), None, Phase::Warmup)?;
    let mut x = first.next;
    let mut e_tss = Vec::with_capacity(steps - 1);
    let mut lte = Vec::with_capacity(steps - 1);
    while x.t >= 1 {
        let t = x.t;
        let at = schedule.point(t);
        let exact = field.guided(at, x.x.view(), gamma1)?;
        if exact_surrogate {
            cache = SurrogateCache {
                delta_eps: exact.delta_eps.clone(),
                source_step: t,
            };
        }
        e_tss.push(norm((&exact.delta_eps - &cache.delta_eps).view()));
        let (outcome, next_cache) = sampler.z2_step(&x, Some(&cache), Phase::Zigzag)?;
        let c = coefficients(&schedule, t)?;
        let x_tilde = translate(&x, &c, exact.delta_eps.view(), gamma1)?;
        let pred_tilde = field.guided(at, x_tilde.x.view(), gamma1)?;
        let reference = forward_step(&c, &x_tilde, pred_tilde.guided.view())?;
        lte.push(norm((&outcome.next.x - &reference.x).view()));
        cache = next_cache;
        x = outcome.next;
    }
    Ok(SweepPoint {
        h,
        steps,
        median_e_tss: median(e_tss),
        median_lte: median(lte),
    })
}

/// [`surrogate_sweep_point`] over every step size in `h_list`.
pub fn surrogate_sweep<F: GuidedField + ?Sized>(
    field: &F,
    span: &Span,
    h_list: &[f64],
    gamma1: f64,
    x_start: ArrayView1<f64>,
    exact_surrogate: bool,
) -> Result<Vec<SweepPoint>> {
    check_step_list(h_list)?;
    h_list
        .iter()
        .map(|&h| surrogate_sweep_point(field, span, h, gamma1, x_start, exact_surrogate))
        .collect()
}

pub fn e_tss_fit(points: &[SweepPoint]) -> Result<OrderFit> {
    let h: Vec<f64> = points.iter().map(|p| p.h).collect();
    let e: Vec<f64> = points.iter().map(|p| p.median_e_tss).collect();
    OrderFit::fit_asymptotic(&h, &e)
}

pub fn lte_fit(points: &[SweepPoint]) -> Result<OrderFit> {
    let h: Vec<f64> = points.iter().map(|p| p.h).collect();
    let e: Vec<f64> = points.iter().map(|p| p.median_lte).collect();
    OrderFit::fit_asymptotic(&h, &e)
}

/// Order fit of the surrogate error; expected slope ≈ 1.
pub fn e_tss_order_sweep<F: GuidedField + ?Sized>(
    field: &F,
    span: &Span,
    h_list: &[f64],
    gamma1: f64,
    x_start: ArrayView1<f64>,
) -> Result<OrderFit> {
    e_tss_fit(&surrogate_sweep(field, span, h_list, gamma1, x_start, false)?)
}

/// Order fit of the per-step LTE; expected slope ≈ 2.
pub fn lte_order_sweep<F: GuidedField + ?Sized>(
    field: &F,
    span: &Span,
    h_list: &[f64],
    gamma1: f64,
    x_start: ArrayView1<f64>,
) -> Result<OrderFit> {
    lte_fit(&surrogate_sweep(field, span, h_list, gamma1, x_start, false)?)
}

/// Initial latent for sweeps when none is given.
pub fn default_start(dim: usize) -> Array1<f64> {
    crate::sampler::initial_noise(dim, 0)
}
