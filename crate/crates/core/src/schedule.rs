//! Discrete noise schedules.
//!
//! Index `t = T` is pure noise and `t = 0` is data; samplers walk `t` from
//! `T` down to `1`. Each schedule stores `T + 1` scalars:
//!
//! - VP: cumulative `ᾱ_t ∈ (0, 1]`, increasing toward `t = 0`.
//! - Flow: `σ_t ≥ 0`, decreasing toward `t = 0`.
//! - Spherical: `θ_t = arccos(√ᾱ_t) ∈ [0, π/2)`, decreasing toward `t = 0`.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Vp,
    Flow,
    Spherical,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Vp, ScheduleKind::Flow, ScheduleKind::Spherical];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Vp => "vp",
            ScheduleKind::Flow => "flow",
            ScheduleKind::Spherical => "spherical",
        }
    }
}

/// A single point of a schedule, detached from the discrete grid.
///
/// Every geometry writes the diffused state as `x = a·x₀ + s·ε`; the field
/// evaluators only need `(a, s)` plus the kind, which decides the native
/// prediction parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePoint {
    pub kind: ScheduleKind,
    pub value: f64,
}

impl NoisePoint {
    pub fn new(kind: ScheduleKind, value: f64) -> Self {
        Self { kind, value }
    }

    /// Signal coefficient `a` in `x = a·x₀ + s·ε`.
    pub fn signal_scale(&self) -> f64 {
        match self.kind {
            ScheduleKind::Vp => self.value.sqrt(),
            ScheduleKind::Flow => 1.0 - self.value,
            ScheduleKind::Spherical => self.value.cos(),
        }
    }

    /// Noise coefficient `s` in `x = a·x₀ + s·ε`.
    pub fn noise_scale(&self) -> f64 {
        match self.kind {
            ScheduleKind::Vp => (1.0 - self.value).sqrt(),
            ScheduleKind::Flow => self.value,
            ScheduleKind::Spherical => self.value.sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    kind: ScheduleKind,
    values: Vec<f64>,
}

impl Schedule {
    /// Builds a schedule from raw values, checking the kind's invariants.
    pub fn new(kind: ScheduleKind, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 values (T >= 1), got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSchedule(format!("value at t={i} is not finite")));
        }
        let strictly = |increasing: bool| {
            values.windows(2).enumerate().find_map(|(i, w)| {
                let ok = if increasing { w[1] > w[0] } else { w[1] < w[0] };
                (!ok).then_some(i + 1)
            })
        };
        match kind {
            ScheduleKind::Vp => {
                if values[0] > 1.0 || *values.last().unwrap() <= 0.0 {
                    return Err(Error::InvalidSchedule("VP values must lie in (0, 1]".into()));
                }
                if let Some(t) = strictly(false) {
                    return Err(Error::InvalidSchedule(format!(
                        "VP alpha-bar must decrease strictly with t (violated at t={t})"
                    )));
                }
            }
            ScheduleKind::Flow => {
                if values[0] < 0.0 {
                    return Err(Error::InvalidSchedule("flow sigma_0 must be >= 0".into()));
                }
                if let Some(t) = strictly(true) {
                    return Err(Error::InvalidSchedule(format!(
                        "flow sigma must increase strictly with t (violated at t={t})"
                    )));
                }
            }
            ScheduleKind::Spherical => {
                if values[0] < 0.0 || *values.last().unwrap() >= FRAC_PI_2 {
                    return Err(Error::InvalidSchedule(
                        "spherical angles must lie in [0, pi/2)".into(),
                    ));
                }
                if let Some(t) = strictly(true) {
                    return Err(Error::InvalidSchedule(format!(
                        "spherical theta must increase strictly with t (violated at t={t})"
                    )));
                }
            }
        }
        Ok(Self { kind, values })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: usize) -> f64 {
        self.values[t]
    }

    pub fn point(&self, t: usize) -> NoisePoint {
        NoisePoint::new(self.kind, self.values[t])
    }

    /// Flow schedule on `[sigma_min, sigma_max]` with a uniform grid.
    pub fn flow_range(steps: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("T must be >= 1".into()));
        }
        if !(sigma_min >= 0.0 && sigma_max > sigma_min) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 <= sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]"
            )));
        }
        let span = sigma_max - sigma_min;
        let values = (0..=steps)
            .map(|t| sigma_min + span * t as f64 / steps as f64)
            .collect();
        Self::new(ScheduleKind::Flow, values)
    }

    /// VP or spherical schedule with uniformly spaced angles on
    /// `[theta_min, theta_max]`; VP stores `ᾱ = cos²θ`.
    pub fn uniform_angle(
        kind: ScheduleKind,
        steps: usize,
        theta_min: f64,
        theta_max: f64,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("T must be >= 1".into()));
        }
        if !(theta_min >= 0.0 && theta_max > theta_min && theta_max < FRAC_PI_2) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 <= theta_min < theta_max < pi/2, got [{theta_min}, {theta_max}]"
            )));
        }
        let span = theta_max - theta_min;
        let thetas = (0..=steps).map(|t| theta_min + span * t as f64 / steps as f64);
        match kind {
            ScheduleKind::Vp => Self::new(kind, thetas.map(|th| th.cos().powi(2)).collect()),
            ScheduleKind::Spherical => Self::new(kind, thetas.collect()),
            ScheduleKind::Flow => Err(Error::InvalidSchedule(
                "uniform_angle builds VP or spherical schedules".into(),
            )),
        }
    }
}

/// VP schedule with `ᾱ` interpolated geometrically from `alpha_start` at
/// `t = 0` to `alpha_end` at `t = T`.
pub fn make_linear_vp(steps: usize, alpha_start: f64, alpha_end: f64) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("T must be >= 1".into()));
    }
    if !(alpha_end > 0.0 && alpha_end < alpha_start && alpha_start <= 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < alpha_end < alpha_start <= 1, got start={alpha_start}, end={alpha_end}"
        )));
    }
    let log_start = alpha_start.ln();
    let log_ratio = alpha_end.ln() - log_start;
    let mut values: Vec<f64> = (0..=steps)
        .map(|t| (log_start + log_ratio * t as f64 / steps as f64).exp())
        .collect();
    // pin the endpoints so exp(ln(.)) round-off never leaves (0, 1]
    values[0] = alpha_start;
    values[steps] = alpha_end;
    Schedule::new(ScheduleKind::Vp, values)
}

/// Flow schedule `σ_t = sigma_max · t / T`.
pub fn make_linear_flow(steps: usize, sigma_max: f64) -> Result<Schedule> {
    if !(sigma_max > 0.0) {
        return Err(Error::InvalidSchedule(format!(
            "sigma_max must be > 0, got {sigma_max}"
        )));
    }
    Schedule::flow_range(steps, 0.0, sigma_max)
}

/// Random valid schedule of the given kind: `T + 1` sorted uniform draws on
/// `[1e-4, 1]` (VP), `[0, 0.999]` (flow) or `[0, 1.5]` (spherical).
pub fn random_schedule<R: Rng + ?Sized>(kind: ScheduleKind, steps: usize, rng: &mut R) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("T must be >= 1".into()));
    }
    let (lo, hi) = match kind {
        ScheduleKind::Vp => (1e-4, 1.0),
        ScheduleKind::Flow => (0.0, 0.999),
        ScheduleKind::Spherical => (0.0, 1.5),
    };
    loop {
        let mut values: Vec<f64> = (0..=steps).map(|_| rng.random_range(lo..=hi)).collect();
        values.sort_by(|a, b| a.total_cmp(b));
        if kind == ScheduleKind::Vp {
            values.reverse();
        }
        // ties are the only way to fail
        if let Ok(s) = Schedule::new(kind, values) {
            return Ok(s);
        }
    }
}

/// Element-wise `θ_t = arccos(√ᾱ_t)`.
pub fn vp_to_spherical(schedule: &Schedule) -> Result<Schedule> {
    if schedule.kind != ScheduleKind::Vp {
        return Err(Error::KindMismatch {
            expected: ScheduleKind::Vp,
            found: schedule.kind,
        });
    }
    let thetas = schedule
        .values
        .iter()
        .map(|a| a.sqrt().clamp(0.0, 1.0).acos())
        .collect();
    Schedule::new(ScheduleKind::Spherical, thetas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn two_point_vp_is_its_own_interpolation() {
        let s = make_linear_vp(1, 0.9, 0.1).unwrap();
        assert_eq!(s.values(), &[0.9, 0.1]);
    }

    #[test]
    fn geometric_midpoint() {
        let s = make_linear_vp(2, 0.9, 0.1).unwrap();
        let oracle = (0.9f64 * 0.1).sqrt();
        assert_relative_eq!(s.value(1), oracle, max_relative = 1e-14);
        assert_relative_eq!(s.value(1), 0.3, max_relative = 1e-14);
        assert_eq!(s.steps(), 2);
    }

    #[test]
    fn vp_rejects_reversed_endpoints() {
        assert!(make_linear_vp(2, 0.1, 0.9).is_err());
        assert!(make_linear_vp(0, 0.9, 0.1).is_err());
        assert!(make_linear_vp(3, 1.2, 0.1).is_err());
    }

    #[test]
    fn linear_flow_grid() {
        assert_eq!(make_linear_flow(2, 1.0).unwrap().values(), &[0.0, 0.5, 1.0]);
        assert_eq!(
            make_linear_flow(4, 1.0).unwrap().values(),
            &[0.0, 0.25, 0.5, 0.75, 1.0]
        );
        assert!(make_linear_flow(1, -1.0).is_err());
        assert!(make_linear_flow(1, 0.0).is_err());
    }

    #[test]
    fn spherical_conversion() {
        let vp = Schedule::new(ScheduleKind::Vp, vec![1.0, 0.5]).unwrap();
        let sph = vp_to_spherical(&vp).unwrap();
        assert_eq!(sph.kind(), ScheduleKind::Spherical);
        assert_eq!(sph.value(0), 0.0);
        assert_relative_eq!(sph.value(1), FRAC_PI_4, max_relative = 1e-15);

        let flow = make_linear_flow(2, 1.0).unwrap();
        assert!(matches!(
            vp_to_spherical(&flow),
            Err(Error::KindMismatch { .. })
        ));
    }

    #[test]
    fn constructor_rejects_bad_values() {
        assert!(Schedule::new(ScheduleKind::Flow, vec![0.0]).is_err());
        assert!(Schedule::new(ScheduleKind::Flow, vec![0.0, 0.0]).is_err());
        assert!(Schedule::new(ScheduleKind::Flow, vec![-0.1, 0.5]).is_err());
        assert!(Schedule::new(ScheduleKind::Vp, vec![0.5, 0.0]).is_err());
        assert!(Schedule::new(ScheduleKind::Spherical, vec![0.1, FRAC_PI_2]).is_err());
        assert!(Schedule::new(ScheduleKind::Vp, vec![0.9, f64::NAN]).is_err());
    }

    #[test]
    fn noise_point_scales_match_geometry() {
        let p = NoisePoint::new(ScheduleKind::Vp, 0.36);
        assert_relative_eq!(p.signal_scale(), 0.6);
        assert_relative_eq!(p.noise_scale(), 0.8);
        let p = NoisePoint::new(ScheduleKind::Flow, 0.25);
        assert_eq!((p.signal_scale(), p.noise_scale()), (0.75, 0.25));
        let th = 0.3f64;
        let p = NoisePoint::new(ScheduleKind::Spherical, th);
        assert_eq!((p.signal_scale(), p.noise_scale()), (th.cos(), th.sin()));
    }

    proptest! {
        #[test]
        fn spherical_round_trip(steps in 1usize..200, start in 0.5f64..1.0, frac in 0.001f64..0.9) {
            let end = start * frac;
            let vp = make_linear_vp(steps, start, end).unwrap();
            let sph = vp_to_spherical(&vp).unwrap();
            for (a, th) in vp.values().iter().zip(sph.values()) {
                prop_assert!((th.cos().powi(2) - a).abs() < 1e-12);
            }
        }

        #[test]
        fn constructed_schedules_are_monotone(
            steps in 1usize..10_000,
            start in 0.5f64..=1.0,
            frac in 1e-4f64..0.5,
            sigma_max in 0.01f64..80.0,
        ) {
            // Schedule::new re-validates; construction succeeding is the check
            let vp = make_linear_vp(steps, start, start * frac).unwrap();
            prop_assert_eq!(vp.steps(), steps);
            prop_assert!(vp.values().windows(2).all(|w| w[1] < w[0]));
            let sph = vp_to_spherical(&vp).unwrap();
            prop_assert!(sph.values().windows(2).all(|w| w[1] > w[0]));
            let flow = make_linear_flow(steps, sigma_max).unwrap();
            prop_assert!(flow.values().windows(2).all(|w| w[1] > w[0]));
        }

        #[test]
        fn random_schedules_validate(seed in any::<u64>(), steps in 1usize..300, kind in 0usize..3) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = random_schedule(ScheduleKind::ALL[kind], steps, &mut rng).unwrap();
            prop_assert_eq!(s.steps(), steps);
            prop_assert_eq!(s.kind(), ScheduleKind::ALL[kind]);
        }
    }
}
