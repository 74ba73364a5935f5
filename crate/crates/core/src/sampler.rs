//! Guided samplers with exact NFE accounting.
//!
//! Four procedures share one affine solver:
//!
//! - `Standard`: one CFG evaluation per step.
//! - `ExplicitZ`: denoise with `γ₁`, invert from the moved point with `γ₂`,
//!   re-denoise; active while `t > T − λ`. 6 NFEs per zigzag step.
//! - `ImplicitZ`: exact noise reuse. The inversion reuses the anchor's
//!   unconditional prediction, so the lookahead-and-return collapses to the
//!   translation `x̃ = x − C γ₁ Δε(x)`. 4 NFEs per zigzag step.
//! - `ZSquared`: the translation uses the Δε cached from the previous step,
//!   so every step costs 2 NFEs. Zigzag window `T − W − λ < t ≤ T − W`.
//!
//! NFEs count only evaluations the algorithm itself needs. Diagnostic
//! evaluations (the exact Δε behind the surrogate error) are not counted.

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::cosine::{cosine_similarity_track, CosineSimilarity};
use crate::analysis::tau::tau_from_noises;
use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::scorefield::{GuidedField, GuidedPrediction};
use crate::solver::{coefficients, forward_step, LatentState, SolverCoefficients};

/// Relative tolerance of the collapsed-forward cross-check.
pub const COLLAPSE_TOLERANCE: f64 = 1e-12;

/// NFEs per classifier-free-guidance evaluation (conditional + unconditional).
pub const NFE_PER_CFG: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    ExplicitZ,
    ImplicitZ,
    ZSquared,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Standard,
        Variant::ExplicitZ,
        Variant::ImplicitZ,
        Variant::ZSquared,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::ExplicitZ => "explicit_z",
            Variant::ImplicitZ => "implicit_z",
            Variant::ZSquared => "z_squared",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub variant: Variant,
    pub gamma1: f64,
    #[serde(default)]
    pub gamma2: f64,
    #[serde(default)]
    pub warmup: usize,
    #[serde(default)]
    pub zigzag_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Zigzag,
    Standard,
}

impl SamplerConfig {
    pub fn new(variant: Variant, gamma1: f64) -> Self {
        Self {
            variant,
            gamma1,
            gamma2: 0.0,
            warmup: 0,
            zigzag_steps: 0,
        }
    }

    pub fn with_window(mut self, warmup: usize, zigzag_steps: usize) -> Self {
        self.warmup = warmup;
        self.zigzag_steps = zigzag_steps;
        self
    }

    pub fn with_gamma2(mut self, gamma2: f64) -> Self {
        self.gamma2 = gamma2;
        self
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if !self.gamma1.is_finite() || !self.gamma2.is_finite() {
            return Err(Error::InvalidConfig("guidance scales must be finite".into()));
        }
        if self.warmup + self.zigzag_steps > steps {
            return Err(Error::InvalidConfig(format!(
                "warmup ({}) + zigzag steps ({}) exceed T = {steps}",
                self.warmup, self.zigzag_steps
            )));
        }
        if matches!(self.variant, Variant::ImplicitZ | Variant::ZSquared) && self.gamma2 != 0.0 {
            return Err(Error::InvalidConfig(format!(
                "{} reuses the unconditional anchor noise; gamma2 must be 0, got {}",
                self.variant.name(),
                self.gamma2
            )));
        }
        if self.variant == Variant::ZSquared && self.zigzag_steps > 0 && self.warmup == 0 {
            return Err(Error::InvalidConfig(
                "z_squared needs warmup >= 1 to populate the surrogate cache".into(),
            ));
        }
        Ok(())
    }

    /// Phase of step `t` in a `steps`-step run.
    pub fn phase(&self, t: usize, steps: usize) -> Phase {
        match self.variant {
            Variant::Standard => Phase::Standard,
            // the explicit algorithm has no warmup offset
            Variant::ExplicitZ => {
                if t + self.zigzag_steps > steps {
                    Phase::Zigzag
                } else {
                    Phase::Standard
                }
            }
            Variant::ImplicitZ | Variant::ZSquared => {
                if t + self.warmup > steps {
                    Phase::Warmup
                } else if t + self.warmup + self.zigzag_steps > steps {
                    Phase::Zigzag
                } else {
                    Phase::Standard
                }
            }
        }
    }

    /// NFEs of a full `steps`-step run.
    pub fn expected_nfe(&self, steps: usize) -> usize {
        let base = NFE_PER_CFG * steps;
        match self.variant {
            Variant::Standard | Variant::ZSquared => base,
            Variant::ExplicitZ => base + 2 * NFE_PER_CFG * self.zigzag_steps,
            Variant::ImplicitZ => base + NFE_PER_CFG * self.zigzag_steps,
        }
    }
}

/// The single cached Δε of the Z² sampler.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateCache {
    pub delta_eps: Array1<f64>,
    pub source_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepOutcome {
    pub next: LatentState,
    pub phase: Phase,
    pub coefficients: SolverCoefficients,
    /// Δε at the step's primary evaluation point.
    pub delta_eps: Array1<f64>,
    pub tau: Option<Array1<f64>>,
    pub e_tss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub phase: Phase,
    pub coefficients: SolverCoefficients,
    pub delta_eps: Array1<f64>,
    pub tau_norm: Option<f64>,
    pub e_tss: Option<f64>,
    /// Similarity of this step's Δε with the previous step's.
    pub cos_sim: Option<CosineSimilarity>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub config: SamplerConfig,
    pub seed: Option<u64>,
    /// States from `t = T` down to `t = 0`.
    pub states: Vec<LatentState>,
    pub nfe: usize,
    pub per_step: Vec<StepDiagnostics>,
}

impl TrajectoryRecord {
    pub fn terminal(&self) -> &LatentState {
        self.states.last().expect("record holds T + 1 states")
    }
}

pub(crate) fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

fn max_abs(v: ArrayView1<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `x − C γ Δε`: the within-step translation shared by the implicit and Z²
/// samplers.
pub fn translate(
    x: &LatentState,
    c: &SolverCoefficients,
    delta_eps: ArrayView1<f64>,
    gamma1: f64,
) -> Result<LatentState> {
    if x.t != c.step {
        return Err(Error::StepMismatch {
            expected: c.step,
            found: x.t,
        });
    }
    if delta_eps.len() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            found: delta_eps.len(),
        });
    }
    Ok(LatentState::new(
        &x.x - &((c.c * gamma1) * &delta_eps),
        x.t,
    ))
}

/// Closed form of `Ψ(Φ(x; ε(x, γ₁)); ε(x, 0))`, with `pred` evaluated at
/// `x` itself.
pub fn implicit_collapse(
    x: &LatentState,
    c: &SolverCoefficients,
    pred: &GuidedPrediction,
) -> Result<LatentState> {
    translate(x, c, pred.delta_eps.view(), pred.gamma)
}

/// `Φ(x̃; ε̃)`, cross-checked against the equivalent step from the anchor,
/// `Φ(x; ε̃ + γ₁ Δε)`. A disagreement means `AC ≠ −B`.
pub fn collapsed_forward(
    x: &LatentState,
    c: &SolverCoefficients,
    x_tilde: &LatentState,
    pred_at_tilde: &GuidedPrediction,
    delta_at_anchor: ArrayView1<f64>,
    gamma1: f64,
) -> Result<LatentState> {
    let via_tilde = forward_step(c, x_tilde, pred_at_tilde.guided.view())?;
    let shifted = &pred_at_tilde.guided + &(gamma1 * &delta_at_anchor);
    let via_anchor = forward_step(c, x, shifted.view())?;
    let deviation = max_abs((&via_tilde.x - &via_anchor.x).view());
    let scale = 1.0
        + c.a.abs() * max_abs(x.x.view())
        + c.b.abs()
            * (max_abs(pred_at_tilde.guided.view()) + gamma1.abs() * max_abs(delta_at_anchor));
    if !(deviation <= COLLAPSE_TOLERANCE * scale) {
        return Err(Error::CollapseMismatch {
            step: c.step,
            deviation,
            residual: c.a * c.c + c.b,
        });
    }
    Ok(via_tilde)
}

/// Runs one sampler over one schedule, counting NFEs.
pub struct Sampler<'a, F: GuidedField + ?Sized> {
    field: &'a F,
    schedule: &'a Schedule,
    config: SamplerConfig,
    nfe: usize,
    diagnostics: bool,
}

impl<'a, F: GuidedField + ?Sized> Sampler<'a, F> {
    pub fn new(field: &'a F, schedule: &'a Schedule, config: SamplerConfig) -> Result<Self> {
        config.validate(schedule.steps())?;
        Ok(Self {
            field,
            schedule,
            config,
            nfe: 0,
            diagnostics: true,
        })
    }

    /// Toggles the uncounted diagnostic evaluations (surrogate error).
    pub fn with_diagnostics(mut self, on: bool) -> Self {
        self.diagnostics = on;
        self
    }

    pub fn nfe(&self) -> usize {
        self.nfe
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    fn evaluate(&mut self, x: ArrayView1<f64>, t: usize, gamma: f64) -> Result<GuidedPrediction> {
        self.nfe += NFE_PER_CFG;
        self.field.guided(self.schedule.point(t), x, gamma)
    }

    fn step_coefficients(&self, x: &LatentState) -> Result<SolverCoefficients> {
        if x.t == 0 {
            return Err(Error::StepOutOfRange {
                step: 0,
                steps: self.schedule.steps(),
            });
        }
        coefficients(self.schedule, x.t)
    }

    /// `x_{t-1} = Φ(x_t; ε(x_t, γ₁))`.
    pub fn standard_step(&mut self, x: &LatentState) -> Result<StepOutcome> {
        let c = self.step_coefficients(x)?;
        let pred = self.evaluate(x.x.view(), x.t, self.config.gamma1)?;
        let next = forward_step(&c, x, pred.guided.view())?;
        Ok(StepOutcome {
            next,
            phase: Phase::Standard,
            coefficients: c,
            delta_eps: pred.delta_eps,
            tau: None,
            e_tss: None,
        })
    }

    /// Denoise, invert from the moved point, re-denoise.
    pub fn explicit_zigzag_step(&mut self, x: &LatentState) -> Result<StepOutcome> {
        let c = self.step_coefficients(x)?;
        let (g1, g2) = (self.config.gamma1, self.config.gamma2);
        let pred = self.evaluate(x.x.view(), x.t, g1)?;
        let x_prev = forward_step(&c, x, pred.guided.view())?;
        // the inversion queries the network at x_{t-1} with timestep t
        let inv = self.evaluate(x_prev.x.view(), x.t, g2)?;
        let inv_noise = inv.at_scale(g2);
        let x_tilde = crate::solver::inverse_step(&c, &x_prev, inv_noise.view())?;
        let pred_tilde = self.evaluate(x_tilde.x.view(), x.t, g1)?;
        let next = forward_step(&c, &x_tilde, pred_tilde.guided.view())?;
        let tau = tau_from_noises(&c, &x_prev, inv_noise.view(), pred.at_scale(g2).view())?;
        Ok(StepOutcome {
            next,
            phase: Phase::Zigzag,
            coefficients: c,
            delta_eps: pred.delta_eps,
            tau: Some(tau),
            e_tss: None,
        })
    }

    /// Exact noise reuse: the collapsed translation followed by one forward
    /// step from `x̃`.
    pub fn implicit_zigzag_step(&mut self, x: &LatentState) -> Result<StepOutcome> {
        let c = self.step_coefficients(x)?;
        let g1 = self.config.gamma1;
        let pred = self.evaluate(x.x.view(), x.t, g1)?;
        let x_tilde = implicit_collapse(x, &c, &pred)?;
        let pred_tilde = self.evaluate(x_tilde.x.view(), x.t, g1)?;
        let next = collapsed_forward(x, &c, &x_tilde, &pred_tilde, pred.delta_eps.view(), g1)?;
        // both inversion branches use the anchor's unconditional noise
        let x_prev = forward_step(&c, x, pred.guided.view())?;
        let reused = pred.at_scale(0.0);
        let tau = tau_from_noises(&c, &x_prev, reused.view(), pred.at_scale(0.0).view())?;
        Ok(StepOutcome {
            next,
            phase: Phase::Zigzag,
            coefficients: c,
            delta_eps: pred.delta_eps,
            tau: Some(tau),
            e_tss: None,
        })
    }

    /// One Z² step. Zigzag steps translate by the cached Δε and evaluate
    /// once at `x̃`; warmup and standard steps are plain CFG steps. Both
    /// refresh the cache.
    pub fn z2_step(
        &mut self,
        x: &LatentState,
        cache: Option<&SurrogateCache>,
        phase: Phase,
    ) -> Result<(StepOutcome, SurrogateCache)> {
        let t = x.t;
        match phase {
            Phase::Zigzag => {
                let cache = cache.ok_or(Error::EmptyCache { step: t })?;
                let c = self.step_coefficients(x)?;
                let g1 = self.config.gamma1;
                let x_tilde = translate(x, &c, cache.delta_eps.view(), g1)?;
                let pred = self.evaluate(x_tilde.x.view(), t, g1)?;
                let next =
                    collapsed_forward(x, &c, &x_tilde, &pred, cache.delta_eps.view(), g1)?;
                let e_tss = if self.diagnostics {
                    let exact = self.field.guided(self.schedule.point(t), x.x.view(), g1)?;
                    Some(norm((&exact.delta_eps - &cache.delta_eps).view()))
                } else {
                    None
                };
                let new_cache = SurrogateCache {
                    delta_eps: pred.delta_eps.clone(),
                    source_step: t,
                };
                let outcome = StepOutcome {
                    next,
                    phase,
                    coefficients: c,
                    delta_eps: pred.delta_eps,
                    // the inversion is never evaluated, so it cannot drift
                    tau: Some(Array1::zeros(x.dim())),
                    e_tss,
                };
                Ok((outcome, new_cache))
            }
            Phase::Warmup | Phase::Standard => {
                let mut outcome = self.standard_step(x)?;
                outcome.phase = phase;
                let new_cache = SurrogateCache {
                    delta_eps: outcome.delta_eps.clone(),
                    source_step: t,
                };
                Ok((outcome, new_cache))
            }
        }
    }

    /// Full run from `x_T`.
    pub fn run(&mut self, x_init: Array1<f64>) -> Result<TrajectoryRecord> {
        let steps = self.schedule.steps();
        if x_init.len() != self.field.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.field.dim(),
                found: x_init.len(),
            });
        }
        self.nfe = 0;
        let mut state = LatentState::new(x_init, steps);
        let mut states = Vec::with_capacity(steps + 1);
        let mut per_step = Vec::with_capacity(steps);
        let mut cache: Option<SurrogateCache> = None;
        states.push(state.clone());
        for t in (1..=steps).rev() {
            let phase = self.config.phase(t, steps);
            let outcome = match (self.config.variant, phase) {
                (Variant::ZSquared, _) => {
                    let (outcome, new_cache) = self.z2_step(&state, cache.as_ref(), phase)?;
                    cache = Some(new_cache);
                    outcome
                }
                (Variant::ExplicitZ, Phase::Zigzag) => self.explicit_zigzag_step(&state)?,
                (Variant::ImplicitZ, Phase::Zigzag) => self.implicit_zigzag_step(&state)?,
                _ => {
                    let mut outcome = self.standard_step(&state)?;
                    outcome.phase = phase;
                    outcome
                }
            };
            per_step.push(StepDiagnostics {
                t,
                phase: outcome.phase,
                coefficients: outcome.coefficients,
                tau_norm: outcome.tau.as_ref().map(|v| norm(v.view())),
                delta_eps: outcome.delta_eps,
                e_tss: outcome.e_tss,
                cos_sim: None,
            });
            state = outcome.next;
            states.push(state.clone());
        }
        let mut record = TrajectoryRecord {
            config: self.config,
            seed: None,
            states,
            nfe: self.nfe,
            per_step,
        };
        let track = cosine_similarity_track(&record);
        for (diag, sim) in record.per_step.iter_mut().skip(1).zip(track) {
            diag.cos_sim = Some(sim);
        }
        Ok(record)
    }
}

/// Seeded standard-normal initial latent.
pub fn initial_noise(dim: usize, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Runs `config` from `x_init`, or from seeded noise when `x_init` is `None`.
pub fn run_trajectory<F: GuidedField + ?Sized>(
    config: SamplerConfig,
    schedule: &Schedule,
    field: &F,
    x_init: Option<Array1<f64>>,
    seed: u64,
) -> Result<TrajectoryRecord> {
    let (x, drawn) = match x_init {
        Some(x) => (x, false),
        None => (initial_noise(field.dim(), seed), true),
    };
    let mut record = Sampler::new(field, schedule, config)?.run(x)?;
    if drawn {
        record.seed = Some(seed);
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_linear_flow, make_linear_vp, vp_to_spherical};
    use crate::scorefield::{ConstantField, GaussianComponent, Mixture, MixtureField};
    use crate::solver::inverse_step;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn standard_normal_field(d: usize) -> MixtureField {
        let m = Mixture::single(vec![0.0; d], 1.0).unwrap();
        MixtureField::new(m.clone(), m).unwrap()
    }

    fn shifted_gaussian_field() -> MixtureField {
        MixtureField::new(
            Mixture::single(vec![1.5], 0.5).unwrap(),
            Mixture::single(vec![0.0], 1.0).unwrap(),
        )
        .unwrap()
    }

    fn two_mode_field() -> MixtureField {
        let mix = Mixture::new(vec![
            GaussianComponent::new(vec![2.0, 0.0], 0.25, 0.5),
            GaussianComponent::new(vec![-2.0, 0.0], 0.25, 0.5),
        ])
        .unwrap();
        MixtureField::from_designated(mix, 0).unwrap()
    }

    #[test]
    fn config_validation() {
        let s = SamplerConfig::new(Variant::ZSquared, 5.0).with_window(5, 44);
        assert!(s.validate(50).is_ok());
        assert!(s.validate(48).is_err());
        assert!(s.with_gamma2(1.0).validate(50).is_err());
        assert!(SamplerConfig::new(Variant::ImplicitZ, 5.0)
            .with_gamma2(0.5)
            .validate(50)
            .is_err());
        assert!(SamplerConfig::new(Variant::ExplicitZ, 5.0)
            .with_gamma2(0.5)
            .with_window(0, 44)
            .validate(50)
            .is_ok());
        assert!(SamplerConfig::new(Variant::ZSquared, 5.0)
            .with_window(0, 10)
            .validate(50)
            .is_err());
        assert!(SamplerConfig::new(Variant::Standard, f64::NAN).validate(50).is_err());
    }

    #[test]
    fn phase_windows() {
        let z2 = SamplerConfig::new(Variant::ZSquared, 1.0).with_window(5, 44);
        assert_eq!(z2.phase(50, 50), Phase::Warmup);
        assert_eq!(z2.phase(46, 50), Phase::Warmup);
        assert_eq!(z2.phase(45, 50), Phase::Zigzag);
        assert_eq!(z2.phase(2, 50), Phase::Zigzag);
        assert_eq!(z2.phase(1, 50), Phase::Standard);
        let ex = SamplerConfig::new(Variant::ExplicitZ, 1.0).with_window(5, 44);
        assert_eq!(ex.phase(50, 50), Phase::Zigzag);
        assert_eq!(ex.phase(7, 50), Phase::Zigzag);
        assert_eq!(ex.phase(6, 50), Phase::Standard);
    }

    #[test]
    fn standard_linear_recursion() {
        // ε = √(1−ᾱ_t) x  ⇒  x_{t−1} = (A + B √(1−ᾱ_t)) x_t
        let s = make_linear_vp(20, 0.999, 0.05).unwrap();
        let field = standard_normal_field(1);
        let rec = run_trajectory(SamplerConfig::new(Variant::Standard, 3.0), &s, &field, Some(array![1.3]), 0)
            .unwrap();
        let mut x = 1.3f64;
        for t in (1..=20).rev() {
            let c = coefficients(&s, t).unwrap();
            x *= c.a + c.b * (1.0 - s.value(t)).sqrt();
            assert_abs_diff_eq!(rec.states[20 - t + 1].x[0], x, epsilon = 1e-12);
        }
        assert_eq!(rec.nfe, 40);
        assert_eq!(rec.states.len(), 21);
        assert_eq!(rec.terminal().t, 0);
    }

    #[test]
    fn zero_guidance_is_unconditional() {
        let s = make_linear_flow(10, 1.0).unwrap();
        let field = two_mode_field();
        let uncond_only = MixtureField::new(field.uncond.clone(), field.uncond.clone()).unwrap();
        let a = run_trajectory(SamplerConfig::new(Variant::Standard, 0.0), &s, &field, None, 4).unwrap();
        let b = run_trajectory(SamplerConfig::new(Variant::Standard, 0.0), &s, &uncond_only, None, 4)
            .unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn nfe_counts() {
        let s = make_linear_flow(50, 1.0).unwrap();
        let field = two_mode_field();
        let cases = [
            (SamplerConfig::new(Variant::Standard, 5.5), 100),
            (SamplerConfig::new(Variant::ZSquared, 5.5).with_window(5, 44), 100),
            (SamplerConfig::new(Variant::ExplicitZ, 5.5).with_window(0, 44), 276),
            (SamplerConfig::new(Variant::ImplicitZ, 5.5).with_window(5, 44), 188),
        ];
        for (cfg, expected) in cases {
            let rec = run_trajectory(cfg, &s, &field, None, 1).unwrap();
            assert_eq!(rec.nfe, expected, "{:?}", cfg.variant);
            assert_eq!(cfg.expected_nfe(50), expected);
        }
    }

    #[test]
    fn lambda_zero_degenerates_to_standard() {
        let s = make_linear_vp(30, 0.9999, 0.01).unwrap();
        let field = two_mode_field();
        let a = run_trajectory(SamplerConfig::new(Variant::Standard, 4.0), &s, &field, None, 9).unwrap();
        let b = run_trajectory(SamplerConfig::new(Variant::ZSquared, 4.0).with_window(5, 0), &s, &field, None, 9)
            .unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.nfe, b.nfe);
    }

    #[test]
    fn empty_cache_is_rejected() {
        let s = make_linear_flow(10, 1.0).unwrap();
        let field = two_mode_field();
        let mut sampler = Sampler::new(&field, &s, SamplerConfig::new(Variant::ZSquared, 2.0)).unwrap();
        let x = LatentState::new(array![0.1, 0.2], 10);
        assert!(matches!(
            sampler.z2_step(&x, None, Phase::Zigzag),
            Err(Error::EmptyCache { step: 10 })
        ));
        assert!(sampler.z2_step(&x, None, Phase::Warmup).is_ok());
    }

    #[test]
    fn exact_cache_matches_implicit_composition() {
        let vp = make_linear_vp(20, 0.9999, 0.02).unwrap();
        let schedules = [vp.clone(), vp_to_spherical(&vp).unwrap(), make_linear_flow(20, 1.0).unwrap()];
        let field = two_mode_field();
        let cfg = SamplerConfig::new(Variant::ZSquared, 3.5).with_window(1, 19);
        let imp = SamplerConfig::new(Variant::ImplicitZ, 3.5).with_window(1, 19);
        for s in &schedules {
            let x = LatentState::new(array![0.4, -0.7], 12);
            let exact = field.guided(s.point(12), x.x.view(), 3.5).unwrap();
            let cache = SurrogateCache {
                delta_eps: exact.delta_eps.clone(),
                source_step: 12,
            };
            let (z2, _) = Sampler::new(&field, s, cfg)
                .unwrap()
                .z2_step(&x, Some(&cache), Phase::Zigzag)
                .unwrap();
            assert_eq!(z2.e_tss, Some(0.0));
            let implicit = Sampler::new(&field, s, imp).unwrap().implicit_zigzag_step(&x).unwrap();
            for (a, b) in z2.next.x.iter().zip(implicit.next.x.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn collapse_equals_lookahead_and_return() {
        let s = make_linear_vp(10, 0.999, 0.05).unwrap();
        let c = coefficients(&s, 6).unwrap();
        let x = LatentState::new(array![0.3, -1.2, 2.0], 6);
        let pred = GuidedPrediction::new(array![0.5, 0.1, -0.3], array![0.2, 0.4, 0.9], 7.0);
        let collapsed = implicit_collapse(&x, &c, &pred).unwrap();
        let prev = forward_step(&c, &x, pred.guided.view()).unwrap();
        let composed = inverse_step(&c, &prev, pred.eps_uncond.view()).unwrap();
        assert_eq!(collapsed.t, 6);
        for (a, b) in collapsed.x.iter().zip(composed.x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn implicit_collapse_examples() {
        let c = SolverCoefficients::from_raw(1.0, -0.1, 0.1, 3);
        let x = LatentState::new(array![1.0, 1.0], 3);
        let pred = GuidedPrediction::new(array![0.0, 0.0], array![0.2, -0.1], 5.0);
        let out = implicit_collapse(&x, &c, &pred).unwrap();
        assert_abs_diff_eq!(out.x[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(out.x[1], 1.05, epsilon = 1e-15);
        let unguided = GuidedPrediction::new(array![0.0, 0.0], array![0.2, -0.1], 0.0);
        assert_eq!(implicit_collapse(&x, &c, &unguided).unwrap(), x);
        let short = GuidedPrediction::new(array![0.0], array![0.2], 1.0);
        assert!(implicit_collapse(&x, &c, &short).is_err());
    }

    #[test]
    fn collapsed_forward_detects_broken_duality() {
        let x = LatentState::new(array![1.0, -2.0], 4);
        let delta = array![0.3, 0.8];
        let pred = GuidedPrediction::new(array![0.1, 0.1], array![0.5, -0.2], 2.0);
        let good = SolverCoefficients::flow(0.4, 0.3, 4);
        let x_tilde = translate(&x, &good, delta.view(), 2.0).unwrap();
        assert!(collapsed_forward(&x, &good, &x_tilde, &pred, delta.view(), 2.0).is_ok());

        let bad = SolverCoefficients::from_raw(1.0, -0.1, 0.2, 4);
        let x_tilde = translate(&x, &bad, delta.view(), 2.0).unwrap();
        assert!(matches!(
            collapsed_forward(&x, &bad, &x_tilde, &pred, delta.view(), 2.0),
            Err(Error::CollapseMismatch { .. })
        ));

        // γ₁ = 0 reduces to a plain forward step from x
        let x_tilde = translate(&x, &good, delta.view(), 0.0).unwrap();
        let out = collapsed_forward(&x, &good, &x_tilde, &pred, delta.view(), 0.0).unwrap();
        assert_eq!(out, forward_step(&good, &x, pred.guided.view()).unwrap());
    }

    #[test]
    fn constant_field_explicit_equals_implicit() {
        let s = make_linear_flow(12, 1.0).unwrap();
        let field = ConstantField::new(array![0.2, -0.4], array![1.0, 0.3]).unwrap();
        let ex = SamplerConfig::new(Variant::ExplicitZ, 4.0).with_window(0, 12);
        let im = SamplerConfig::new(Variant::ImplicitZ, 4.0).with_window(0, 12);
        let a = run_trajectory(ex, &s, &field, None, 2).unwrap();
        let b = run_trajectory(im, &s, &field, None, 2).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            for (u, v) in sa.x.iter().zip(sb.x.iter()) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
        }
        assert!(a.per_step.iter().all(|d| d.tau_norm == Some(0.0)));
    }

    #[test]
    fn explicit_with_equal_scales_and_reused_prediction_cancels() {
        // Ψ∘Φ with the same prediction object is the identity, so the
        // re-denoised state equals the first forward result
        let c = SolverCoefficients::vp(0.4, 0.6, 2);
        let x = LatentState::new(array![0.7, 0.1], 2);
        let pred = GuidedPrediction::new(array![0.3, -0.2], array![0.9, 0.4], 2.5);
        let prev = forward_step(&c, &x, pred.guided.view()).unwrap();
        let back = inverse_step(&c, &prev, pred.guided.view()).unwrap();
        let again = forward_step(&c, &back, pred.guided.view()).unwrap();
        for (a, b) in again.x.iter().zip(prev.x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn tau_is_zero_for_implicit_and_positive_for_explicit() {
        let s = make_linear_vp(30, 0.9999, 0.02).unwrap();
        let field = shifted_gaussian_field();
        let im = run_trajectory(
            SamplerConfig::new(Variant::ImplicitZ, 5.5).with_window(0, 30),
            &s,
            &field,
            None,
            3,
        )
        .unwrap();
        assert!(im.per_step.iter().all(|d| d.tau_norm == Some(0.0)));
        let ex = run_trajectory(
            SamplerConfig::new(Variant::ExplicitZ, 5.5).with_window(0, 30),
            &s,
            &field,
            None,
            3,
        )
        .unwrap();
        assert!(ex.per_step.iter().all(|d| d.tau_norm.unwrap() > 0.0));
    }

    #[test]
    fn runs_are_deterministic() {
        let s = make_linear_flow(25, 1.0).unwrap();
        let field = two_mode_field();
        for v in Variant::ALL {
            let cfg = SamplerConfig::new(v, 3.0).with_window(3, 20);
            let a = run_trajectory(cfg, &s, &field, None, 77).unwrap();
            let b = run_trajectory(cfg, &s, &field, None, 77).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.seed, Some(77));
        }
    }

    #[test]
    fn z2_records_surrogate_error_in_zigzag_only() {
        let s = make_linear_flow(20, 1.0).unwrap();
        let field = two_mode_field();
        let rec = run_trajectory(SamplerConfig::new(Variant::ZSquared, 2.0).with_window(3, 15), &s, &field, None, 5)
            .unwrap();
        for d in &rec.per_step {
            assert_eq!(d.e_tss.is_some(), d.phase == Phase::Zigzag);
        }
        assert_eq!(rec.per_step[0].cos_sim, None);
        assert!(rec.per_step[1..].iter().all(|d| d.cos_sim.is_some()));
    }
}
