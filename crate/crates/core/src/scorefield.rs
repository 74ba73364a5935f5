//! Analytic prediction fields for isotropic Gaussian mixtures.
//!
//! A data distribution `Σ wᵢ N(μᵢ, sᵢ² I)` diffused to a schedule point with
//! `x = a·x₀ + s·ε` stays a mixture with components `N(a μᵢ, vᵢ I)`,
//! `vᵢ = a² sᵢ² + s²`. The minimum-MSE predictions are posterior averages:
//!
//! ```text
//! ε̂(x)  = s Σ rᵢ(x) (x − a μᵢ) / vᵢ          (= −s ∇log p(x))
//! x̂₀(x) = Σ rᵢ(x) [μᵢ + (a sᵢ² / vᵢ)(x − a μᵢ)]
//! ```
//!
//! with `rᵢ` the posterior responsibilities. Solvers consume the native
//! parameterization of their geometry: ε for VP, `v = ε̂ − x̂₀` for flow and
//! `v = cos θ ε̂ − sin θ x̂₀` for spherical.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{NoisePoint, Schedule, ScheduleKind};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub var: f64,
    pub weight: f64,
}

impl GaussianComponent {
    pub fn new(mean: Vec<f64>, var: f64, weight: f64) -> Self {
        Self { mean, var, weight }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    means: Vec<Array1<f64>>,
    vars: Vec<f64>,
    log_weights: Vec<f64>,
    dim: usize,
}

/// Per-component quantities at one `(point, x)`.
struct Posterior {
    resp: Vec<f64>,
    /// `(x − a μᵢ) / vᵢ`
    scaled_diff: Vec<Array1<f64>>,
    /// `1 / vᵢ`
    inv_var: Vec<f64>,
    /// `a sᵢ² / vᵢ`
    gain: Vec<f64>,
    log_density: f64,
}

impl Mixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::InvalidMixture("mixture has no components".into()));
        };
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidMixture("zero-dimensional mean".into()));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::InvalidMixture(format!(
                    "component {i} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !c.mean.iter().all(|m| m.is_finite()) {
                return Err(Error::InvalidMixture(format!("component {i} mean is not finite")));
            }
            if !(c.var > 0.0 && c.var.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "component {i} variance must be positive, got {}",
                    c.var
                )));
            }
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::InvalidMixture(format!(
                    "component {i} weight must lie in (0, 1], got {}",
                    c.weight
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            means: components.iter().map(|c| Array1::from(c.mean.clone())).collect(),
            vars: components.iter().map(|c| c.var).collect(),
            log_weights: components.iter().map(|c| c.weight.ln()).collect(),
            dim,
        })
    }

    pub fn single(mean: Vec<f64>, var: f64) -> Result<Self> {
        Self::new(vec![GaussianComponent::new(mean, var, 1.0)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Component `index` on its own, renormalised to weight 1.
    pub fn component(&self, index: usize) -> Result<Self> {
        let mean = self
            .means
            .get(index)
            .ok_or_else(|| {
                Error::InvalidMixture(format!(
                    "component index {index} out of range ({} components)",
                    self.len()
                ))
            })?
            .to_vec();
        Self::single(mean, self.vars[index])
    }

    fn posterior(&self, at: NoisePoint, x: ArrayView1<f64>) -> Result<Posterior> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field input"));
        }
        let a = at.signal_scale();
        let s = at.noise_scale();
        let n = self.len();
        let mut log_terms = Vec::with_capacity(n);
        let mut scaled_diff = Vec::with_capacity(n);
        let mut inv_var = Vec::with_capacity(n);
        let mut gain = Vec::with_capacity(n);
        for i in 0..n {
            let v = a * a * self.vars[i] + s * s;
            if !(v > 0.0) {
                return Err(Error::InvalidMixture(format!(
                    "marginal variance of component {i} is {v}"
                )));
            }
            let diff = &x - &(a * &self.means[i]);
            let sq = diff.dot(&diff);
            log_terms.push(
                self.log_weights[i] - 0.5 * self.dim as f64 * (LN_2PI + v.ln()) - 0.5 * sq / v,
            );
            scaled_diff.push(diff / v);
            inv_var.push(1.0 / v);
            gain.push(a * self.vars[i] / v);
        }
        // log-sum-exp with max subtraction
        let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let resp_unnorm: Vec<f64> = log_terms.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = resp_unnorm.iter().sum();
        Ok(Posterior {
            resp: resp_unnorm.iter().map(|r| r / z).collect(),
            scaled_diff,
            inv_var,
            gain,
            log_density: max + z.ln(),
        })
    }

    /// `log p(x)` of the mixture diffused to `at`.
    pub fn log_density(&self, at: NoisePoint, x: ArrayView1<f64>) -> Result<f64> {
        Ok(self.posterior(at, x)?.log_density)
    }

    /// Exact ε-prediction `E[ε | x]`.
    pub fn epsilon(&self, at: NoisePoint, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let post = self.posterior(at, x)?;
        Ok(at.noise_scale() * weighted_sum(&post.resp, &post.scaled_diff, self.dim))
    }

    /// Exact data prediction `E[x₀ | x]` (Tweedie).
    pub fn denoised(&self, at: NoisePoint, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let post = self.posterior(at, x)?;
        Ok(self.denoised_from(&post, at, x))
    }

    fn component_denoised(&self, post: &Posterior, at: NoisePoint, x: ArrayView1<f64>) -> Vec<Array1<f64>> {
        let a = at.signal_scale();
        (0..self.len())
            .map(|i| &self.means[i] + &(post.gain[i] * &(&x - &(a * &self.means[i]))))
            .collect()
    }

    fn denoised_from(&self, post: &Posterior, at: NoisePoint, x: ArrayView1<f64>) -> Array1<f64> {
        weighted_sum(&post.resp, &self.component_denoised(post, at, x), self.dim)
    }

    /// Prediction in the geometry's native parameterization.
    pub fn native(&self, at: NoisePoint, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let post = self.posterior(at, x)?;
        let eps = at.noise_scale() * weighted_sum(&post.resp, &post.scaled_diff, self.dim);
        let (ce, cx) = native_weights(at);
        if cx == 0.0 {
            return Ok(ce * eps);
        }
        let x0 = self.denoised_from(&post, at, x);
        Ok(ce * eps + cx * x0)
    }

    /// Jacobian of [`Mixture::epsilon`] with respect to `x`:
    /// `s [(Σ rᵢ/vᵢ) I − Σ rᵢ uᵢuᵢᵀ + ū ūᵀ]`, `uᵢ = (x − a μᵢ)/vᵢ`.
    pub fn epsilon_jacobian(&self, at: NoisePoint, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        let post = self.posterior(at, x)?;
        Ok(at.noise_scale() * self.score_jacobian(&post))
    }

    fn score_jacobian(&self, post: &Posterior) -> Array2<f64> {
        let d = self.dim;
        let mean_u = weighted_sum(&post.resp, &post.scaled_diff, d);
        let diag: f64 = post.resp.iter().zip(&post.inv_var).map(|(r, iv)| r * iv).sum();
        let mut j = Array2::<f64>::eye(d) * diag;
        for (r, u) in post.resp.iter().zip(&post.scaled_diff) {
            add_outer(&mut j, -r, u, u);
        }
        add_outer(&mut j, 1.0, &mean_u, &mean_u);
        j
    }

    /// Jacobian of [`Mixture::native`].
    pub fn native_jacobian(&self, at: NoisePoint, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        let post = self.posterior(at, x)?;
        let d = self.dim;
        let (ce, cx) = native_weights(at);
        let mut j = (ce * at.noise_scale()) * self.score_jacobian(&post);
        if cx != 0.0 {
            // J_x̂₀ = (Σ rᵢ kᵢ) I − Σ rᵢ mᵢ uᵢᵀ + m̄ ūᵀ
            let m = self.component_denoised(&post, at, x);
            let mean_m = weighted_sum(&post.resp, &m, d);
            let mean_u = weighted_sum(&post.resp, &post.scaled_diff, d);
            let diag: f64 = post.resp.iter().zip(&post.gain).map(|(r, k)| r * k).sum();
            let mut jx = Array2::<f64>::eye(d) * diag;
            for ((r, mi), ui) in post.resp.iter().zip(&m).zip(&post.scaled_diff) {
                add_outer(&mut jx, -r, mi, ui);
            }
            add_outer(&mut jx, 1.0, &mean_m, &mean_u);
            j.scaled_add(cx, &jx);
        }
        Ok(j)
    }
}

/// `(c_ε, c_x)` with native prediction `c_ε ε̂ + c_x x̂₀`.
fn native_weights(at: NoisePoint) -> (f64, f64) {
    match at.kind {
        ScheduleKind::Vp => (1.0, 0.0),
        ScheduleKind::Flow => (1.0, -1.0),
        ScheduleKind::Spherical => (at.value.cos(), -at.value.sin()),
    }
}

fn weighted_sum(weights: &[f64], vectors: &[Array1<f64>], dim: usize) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    for (w, v) in weights.iter().zip(vectors) {
        out.scaled_add(*w, v);
    }
    out
}

fn add_outer(m: &mut Array2<f64>, scale: f64, u: &Array1<f64>, v: &Array1<f64>) {
    for (i, ui) in u.iter().enumerate() {
        let su = scale * ui;
        for (j, vj) in v.iter().enumerate() {
            m[[i, j]] += su * vj;
        }
    }
}

/// Exact ε-prediction of `mix` diffused by `schedule` at step `t`.
pub fn exact_epsilon(
    mix: &Mixture,
    schedule: &Schedule,
    x: ArrayView1<f64>,
    t: usize,
) -> Result<Array1<f64>> {
    check_step(schedule, t)?;
    mix.epsilon(schedule.point(t), x)
}

/// Jacobian of [`exact_epsilon`] in `x`.
pub fn jacobian(
    mix: &Mixture,
    schedule: &Schedule,
    x: ArrayView1<f64>,
    t: usize,
) -> Result<Array2<f64>> {
    check_step(schedule, t)?;
    mix.epsilon_jacobian(schedule.point(t), x)
}

fn check_step(schedule: &Schedule, t: usize) -> Result<()> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::StepOutOfRange {
            step: t,
            steps: schedule.steps(),
        });
    }
    Ok(())
}

/// Converts an ε-prediction into the velocity used by flow (`v = ε − x̂₀`)
/// and spherical (`v = cos θ ε − sin θ x̂₀`) solvers, with `x̂₀` recovered
/// from `x = a x̂₀ + s ε`.
pub fn epsilon_to_velocity(
    eps: ArrayView1<f64>,
    x: ArrayView1<f64>,
    at: NoisePoint,
) -> Result<Array1<f64>> {
    if eps.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: eps.len(),
        });
    }
    match at.kind {
        ScheduleKind::Vp => Err(Error::UnsupportedConversion(
            "VP solvers consume epsilon directly; there is no velocity form".into(),
        )),
        ScheduleKind::Flow => {
            let a = at.signal_scale();
            if a == 0.0 {
                return Err(Error::UnsupportedConversion(
                    "x0 cannot be recovered from epsilon at sigma = 1".into(),
                ));
            }
            Ok((&eps - &x) / a)
        }
        ScheduleKind::Spherical => {
            let (sin, cos) = at.value.sin_cos();
            Ok((&eps - &(sin * &x)) / cos)
        }
    }
}

/// Inverse of [`epsilon_to_velocity`].
pub fn velocity_to_epsilon(
    v: ArrayView1<f64>,
    x: ArrayView1<f64>,
    at: NoisePoint,
) -> Result<Array1<f64>> {
    if v.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: v.len(),
        });
    }
    match at.kind {
        ScheduleKind::Vp => Err(Error::UnsupportedConversion(
            "VP solvers consume epsilon directly; there is no velocity form".into(),
        )),
        ScheduleKind::Flow => Ok(&x + &(at.signal_scale() * &v)),
        ScheduleKind::Spherical => {
            let (sin, cos) = at.value.sin_cos();
            Ok(cos * &v + &(sin * &x))
        }
    }
}

/// A CFG pair and its guided combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuidedPrediction {
    pub eps_uncond: Array1<f64>,
    pub eps_cond: Array1<f64>,
    pub delta_eps: Array1<f64>,
    pub gamma: f64,
    pub guided: Array1<f64>,
}

impl GuidedPrediction {
    pub fn new(eps_uncond: Array1<f64>, eps_cond: Array1<f64>, gamma: f64) -> Self {
        let delta_eps = &eps_cond - &eps_uncond;
        let guided = &eps_uncond + &(gamma * &delta_eps);
        Self {
            eps_uncond,
            eps_cond,
            delta_eps,
            gamma,
            guided,
        }
    }

    /// `ε(x, γ) = ε_uncond + γ Δε` at another scale.
    pub fn at_scale(&self, gamma: f64) -> Array1<f64> {
        if gamma == 0.0 {
            return self.eps_uncond.clone();
        }
        &self.eps_uncond + &(gamma * &self.delta_eps)
    }
}

/// A conditional/unconditional pair of prediction fields in the native
/// parameterization of the schedule point.
pub trait GuidedField: Sync {
    fn dim(&self) -> usize;

    /// `(uncond, cond)` predictions.
    fn predict_pair(&self, at: NoisePoint, x: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)>;

    /// `(uncond, cond)` Jacobians in `x`.
    fn jacobian_pair(&self, at: NoisePoint, x: ArrayView1<f64>) -> Result<(Array2<f64>, Array2<f64>)>;

    /// Conditional log-density, when the field has one.
    fn conditional_log_density(&self, _at: NoisePoint, _x: ArrayView1<f64>) -> Option<f64> {
        None
    }

    fn guided(&self, at: NoisePoint, x: ArrayView1<f64>, gamma: f64) -> Result<GuidedPrediction> {
        let (u, c) = self.predict_pair(at, x)?;
        Ok(GuidedPrediction::new(u, c, gamma))
    }
}

/// Analytic field: the conditional density is one mode (or sub-mixture) of
/// the unconditional one.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureField {
    pub cond: Mixture,
    pub uncond: Mixture,
}

impl MixtureField {
    pub fn new(cond: Mixture, uncond: Mixture) -> Result<Self> {
        if cond.dim() != uncond.dim() {
            return Err(Error::DimensionMismatch {
                expected: uncond.dim(),
                found: cond.dim(),
            });
        }
        Ok(Self { cond, uncond })
    }

    /// Unconditional = `mix`, conditional = its component `index`.
    pub fn from_designated(mix: Mixture, index: usize) -> Result<Self> {
        let cond = mix.component(index)?;
        Self::new(cond, mix)
    }
}

impl GuidedField for MixtureField {
    fn dim(&self) -> usize {
        self.uncond.dim()
    }

    fn predict_pair(&self, at: NoisePoint, x: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        Ok((self.uncond.native(at, x)?, self.cond.native(at, x)?))
    }

    fn jacobian_pair(&self, at: NoisePoint, x: ArrayView1<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((
            self.uncond.native_jacobian(at, x)?,
            self.cond.native_jacobian(at, x)?,
        ))
    }

    fn conditional_log_density(&self, at: NoisePoint, x: ArrayView1<f64>) -> Option<f64> {
        self.cond.log_density(at, x).ok()
    }
}

/// Position- and time-independent predictions (zero Jacobian).
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    pub uncond: Array1<f64>,
    pub cond: Array1<f64>,
}

impl ConstantField {
    pub fn new(uncond: Array1<f64>, cond: Array1<f64>) -> Result<Self> {
        if uncond.len() != cond.len() {
            return Err(Error::DimensionMismatch {
                expected: uncond.len(),
                found: cond.len(),
            });
        }
        Ok(Self { uncond, cond })
    }
}

impl GuidedField for ConstantField {
    fn dim(&self) -> usize {
        self.uncond.len()
    }

    fn predict_pair(&self, _at: NoisePoint, x: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok((self.uncond.clone(), self.cond.clone()))
    }

    fn jacobian_pair(&self, _at: NoisePoint, _x: ArrayView1<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let d = self.dim();
        Ok((Array2::zeros((d, d)), Array2::zeros((d, d))))
    }
}

/// CFG prediction of `field` at step `t` of `schedule`.
pub fn guided_prediction<F: GuidedField + ?Sized>(
    field: &F,
    schedule: &Schedule,
    x: ArrayView1<f64>,
    t: usize,
    gamma: f64,
) -> Result<GuidedPrediction> {
    check_step(schedule, t)?;
    field.guided(schedule.point(t), x, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_linear_flow, make_linear_vp};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vp_point(alpha: f64) -> NoisePoint {
        NoisePoint::new(ScheduleKind::Vp, alpha)
    }

    fn two_modes() -> Mixture {
        Mixture::new(vec![
            GaussianComponent::new(vec![2.0, 0.5], 0.3, 0.4),
            GaussianComponent::new(vec![-1.5, -1.0], 0.8, 0.6),
        ])
        .unwrap()
    }

    #[test]
    fn standard_normal_epsilon_is_linear() {
        let mix = Mixture::single(vec![0.0], 1.0).unwrap();
        let eps = mix.epsilon(vp_point(0.5), array![2.0].view()).unwrap();
        assert_abs_diff_eq!(eps[0], 0.5f64.sqrt() * 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eps[0], 1.414_214, epsilon = 1e-6);
        let zero = mix.epsilon(vp_point(0.3), array![0.0].view()).unwrap();
        assert_eq!(zero[0], 0.0);
    }

    #[test]
    fn standard_normal_jacobian() {
        let mix = Mixture::single(vec![0.0, 0.0, 0.0], 1.0).unwrap();
        let j = mix.epsilon_jacobian(vp_point(0.7), array![0.3, -2.0, 1.0].view()).unwrap();
        let expected = Array2::<f64>::eye(3) * 0.3f64.sqrt();
        for (a, b) in j.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let s = make_linear_vp(2, 0.9, 0.5).unwrap();
        let one = Mixture::single(vec![0.0], 1.0).unwrap();
        let j = jacobian(&one, &s, array![4.0].view(), 2).unwrap();
        assert_abs_diff_eq!(j[[0, 0]], 0.707_107, epsilon = 1e-6);
    }

    #[test]
    fn rejects_bad_mixtures() {
        assert!(Mixture::new(vec![]).is_err());
        assert!(Mixture::new(vec![GaussianComponent::new(vec![0.0], 0.0, 1.0)]).is_err());
        assert!(Mixture::new(vec![
            GaussianComponent::new(vec![0.0], 1.0, 0.5),
            GaussianComponent::new(vec![0.0], 1.0, 0.4),
        ])
        .is_err());
        assert!(Mixture::new(vec![
            GaussianComponent::new(vec![0.0], 1.0, 0.5),
            GaussianComponent::new(vec![0.0, 1.0], 1.0, 0.5),
        ])
        .is_err());
        let mix = two_modes();
        assert!(mix.epsilon(vp_point(0.5), array![f64::NAN, 0.0].view()).is_err());
        assert!(mix.epsilon(vp_point(0.5), array![0.0].view()).is_err());
        assert!(mix.component(2).is_err());
    }

    fn finite_difference_score(mix: &Mixture, at: NoisePoint, x: &Array1<f64>, h: f64) -> Array1<f64> {
        let mut g = Array1::zeros(x.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (mix.log_density(at, xp.view()).unwrap() - mix.log_density(at, xm.view()).unwrap())
                / (2.0 * h);
        }
        g
    }

    #[test]
    fn epsilon_matches_finite_difference_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let d = rng.random_range(1..=8);
            let k = rng.random_range(1..=3);
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let mut comps: Vec<GaussianComponent> = raw
                .iter()
                .map(|w| {
                    GaussianComponent::new(
                        (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                        rng.random_range(0.2..2.0),
                        w / total,
                    )
                })
                .collect();
            let fix: f64 = comps.iter().map(|c| c.weight).sum();
            comps[0].weight += 1.0 - fix;
            let mix = Mixture::new(comps).unwrap();
            let at = vp_point(rng.random_range(0.05..0.95));
            let x: Array1<f64> = (0..d).map(|_| rng.random_range(-2.5..2.5)).collect();
            let eps = mix.epsilon(at, x.view()).unwrap();
            let fd = -at.noise_scale() * finite_difference_score(&mix, at, &x, 1e-5);
            for (a, b) in eps.iter().zip(fd.iter()) {
                assert!((a - b).abs() < 1e-6, "eps {a} vs fd {b}");
            }
        }
    }

    fn finite_difference_jacobian(
        f: impl Fn(ArrayView1<f64>) -> Array1<f64>,
        x: &Array1<f64>,
        h: f64,
    ) -> Array2<f64> {
        let d = x.len();
        let mut j = Array2::zeros((d, d));
        for k in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let col = (f(xp.view()) - f(xm.view())) / (2.0 * h);
            j.column_mut(k).assign(&col);
        }
        j
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mix = two_modes();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in ScheduleKind::ALL {
            for _ in 0..50 {
                let at = match kind {
                    ScheduleKind::Vp => vp_point(rng.random_range(0.05..0.95)),
                    ScheduleKind::Flow => NoisePoint::new(kind, rng.random_range(0.05..1.0)),
                    ScheduleKind::Spherical => NoisePoint::new(kind, rng.random_range(0.05..1.4)),
                };
                let x: Array1<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
                let j = mix.native_jacobian(at, x.view()).unwrap();
                let fd = finite_difference_jacobian(|p| mix.native(at, p).unwrap(), &x, 1e-5);
                for (a, b) in j.iter().zip(fd.iter()) {
                    assert!((a - b).abs() < 1e-5, "{kind:?}: {a} vs {b}");
                }
                let je = mix.epsilon_jacobian(at, x.view()).unwrap();
                let fde = finite_difference_jacobian(|p| mix.epsilon(at, p).unwrap(), &x, 1e-5);
                for (a, b) in je.iter().zip(fde.iter()) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn native_matches_conversion_of_epsilon() {
        let mix = two_modes();
        let x = array![0.4, -0.9];
        for at in [
            NoisePoint::new(ScheduleKind::Flow, 0.6),
            NoisePoint::new(ScheduleKind::Spherical, 0.9),
        ] {
            let eps = mix.epsilon(at, x.view()).unwrap();
            let v = epsilon_to_velocity(eps.view(), x.view(), at).unwrap();
            let native = mix.native(at, x.view()).unwrap();
            for (a, b) in v.iter().zip(native.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
            let back = velocity_to_epsilon(v.view(), x.view(), at).unwrap();
            for (a, b) in back.iter().zip(eps.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn flow_velocity_at_pure_noise() {
        // at σ = 1, x = ε, so v = ε − x̂₀ with x̂₀ the data mean
        let mix = two_modes();
        let at = NoisePoint::new(ScheduleKind::Flow, 1.0);
        let x = array![0.7, 0.2];
        let v = mix.native(at, x.view()).unwrap();
        let eps = mix.epsilon(at, x.view()).unwrap();
        let x0 = mix.denoised(at, x.view()).unwrap();
        assert_abs_diff_eq!(eps[0], x[0], epsilon = 1e-15);
        let data_mean = 0.4 * 2.0 + 0.6 * -1.5;
        assert_abs_diff_eq!(x0[0], data_mean, epsilon = 1e-12);
        assert_abs_diff_eq!(v[0], eps[0] - x0[0], epsilon = 1e-15);
        assert!(matches!(
            epsilon_to_velocity(eps.view(), x.view(), at),
            Err(Error::UnsupportedConversion(_))
        ));
        // the inverse direction stays defined: ε = x + (1 − σ) v = x
        let back = velocity_to_epsilon(v.view(), x.view(), at).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn conversion_edge_cases() {
        let at = NoisePoint::new(ScheduleKind::Flow, 0.3);
        let zero = array![0.0, 0.0];
        assert_eq!(epsilon_to_velocity(zero.view(), zero.view(), at).unwrap(), zero);
        let vp = vp_point(0.5);
        assert!(epsilon_to_velocity(zero.view(), zero.view(), vp).is_err());
        assert!(epsilon_to_velocity(array![1.0].view(), zero.view(), at).is_err());
    }

    #[test]
    fn guided_prediction_formula() {
        let field = MixtureField::from_designated(two_modes(), 0).unwrap();
        let s = make_linear_flow(10, 1.0).unwrap();
        let x = array![0.1, 0.2];
        let p0 = guided_prediction(&field, &s, x.view(), 5, 0.0).unwrap();
        assert_eq!(p0.guided, p0.eps_uncond);
        let p1 = guided_prediction(&field, &s, x.view(), 5, 1.0).unwrap();
        for (a, b) in p1.guided.iter().zip(p1.eps_cond.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let p = guided_prediction(&field, &s, x.view(), 5, 7.5).unwrap();
        assert_eq!(p.guided, &p.eps_uncond + &(7.5 * &p.delta_eps));
        assert!(guided_prediction(&field, &s, x.view(), 0, 1.0).is_err());

        let same = MixtureField::new(two_modes(), two_modes()).unwrap();
        for gamma in [0.0, 3.0, 12.0] {
            let p = guided_prediction(&same, &s, x.view(), 3, gamma).unwrap();
            assert!(p.delta_eps.iter().all(|v| *v == 0.0));
            assert_eq!(p.guided, p.eps_uncond);
        }
    }

    #[test]
    fn posterior_survives_far_points() {
        let mix = Mixture::new(vec![
            GaussianComponent::new(vec![50.0], 0.01, 0.5),
            GaussianComponent::new(vec![-50.0], 0.01, 0.5),
        ])
        .unwrap();
        let at = vp_point(0.999);
        let eps = mix.epsilon(at, array![30.0].view()).unwrap();
        assert!(eps[0].is_finite());
        assert!(mix.log_density(at, array![30.0].view()).unwrap().is_finite());
    }

    #[test]
    fn delta_eps_is_lipschitz_on_bounded_region() {
        let field = MixtureField::from_designated(two_modes(), 0).unwrap();
        let at = NoisePoint::new(ScheduleKind::Flow, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut estimate = |n: usize| {
            let mut best = 0.0f64;
            for _ in 0..n {
                let p: Array1<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
                let q: Array1<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
                let dp = field.guided(at, p.view(), 1.0).unwrap().delta_eps;
                let dq = field.guided(at, q.view(), 1.0).unwrap().delta_eps;
                let num = (&dp - &dq).mapv(|v| v * v).sum().sqrt();
                let den = (&p - &q).mapv(|v| v * v).sum().sqrt();
                best = best.max(num / den);
            }
            best
        };
        let coarse = estimate(2000);
        let fine = estimate(20000);
        assert!(coarse.is_finite() && fine.is_finite());
        assert!(fine < 1.5 * coarse, "estimate unstable: {coarse} -> {fine}");
    }
}
