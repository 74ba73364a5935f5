use std::collections::BTreeMap;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::{json, Map, Value};
use z2_core::analysis::bea::bea_point;
use z2_core::analysis::fit::check_step_list;
use z2_core::analysis::sweep::{e_tss_fit, lte_fit, surrogate_sweep_point};
use z2_core::analysis::{BeaSweep, OrderFit, Span, SweepPoint};
use z2_core::sampler::{initial_noise, TrajectoryRecord};
use z2_core::solver::{coefficients, forward_step, inverse_step, raw_coefficients};
use z2_core::{
    collapsed_forward, implicit_collapse, random_schedule, run_trajectory, GuidedField,
    GuidedPrediction, LatentState, MixtureField, SamplerConfig, ScheduleKind,
};

use crate::config::{ExperimentConfig, SweepParameter};
use crate::output::{fit_rows, Row};
use crate::CliError;

pub const COLLAPSE_LIMIT: f64 = 1e-10;
pub const E_TSS_SLOPE: (f64, f64) = (0.8, 1.2);
pub const LTE_SLOPE: (f64, f64) = (1.8, 2.2);
pub const BEA_MIN_SLOPE: f64 = 1.8;
pub const PROXY_LABEL: &str =
    "terminal log-density under the conditional mixture (proxy for conditional alignment)";

#[derive(Debug, Clone, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Check A⁻¹B + C = 0 and AC + B = 0 at every step of every schedule kind.
    VerifyDuality,
    /// Randomized equivalence suite for the collapsed zigzag step.
    CollapseCheck,
    /// Convergence orders of the surrogate error and the per-step LTE.
    OrderSweep {
        /// Seed the cache with the exact Δε before every step.
        #[arg(long)]
        exact_surrogate: bool,
    },
    /// Agreement of the implicit zigzag trajectory with the effective field.
    BeaCheck,
    /// Run the configured sampler and record per-step diagnostics.
    Sample,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::VerifyDuality => "verify-duality",
            Command::CollapseCheck => "collapse-check",
            Command::OrderSweep { .. } => "order-sweep",
            Command::BeaCheck => "bea-check",
            Command::Sample => "sample",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub failures: Vec<String>,
    /// Human-readable result lines.
    pub report: Vec<String>,
    pub steps: Vec<Row>,
    pub fits: Vec<Row>,
    pub summary: Map<String, Value>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn run_command(
    command: &Command,
    cfg: &ExperimentConfig,
    pool: &rayon::ThreadPool,
) -> Result<Outcome, CliError> {
    cfg.validate()?;
    match command {
        Command::VerifyDuality => verify_duality(cfg),
        Command::CollapseCheck => pool.install(|| collapse_check(cfg)),
        Command::OrderSweep { exact_surrogate } => pool.install(|| order_sweep(cfg, *exact_surrogate)),
        Command::BeaCheck => pool.install(|| bea_check(cfg)),
        Command::Sample => pool.install(|| sample(cfg)),
    }
}

fn coefficient_row(series: &str, step: usize, t: usize, c: &z2_core::SolverCoefficients) -> Row {
    Row {
        step: Some(step),
        t: Some(t),
        a: Some(c.a),
        b: Some(c.b),
        c: Some(c.c),
        ..Row::series(series)
    }
}

pub fn verify_duality(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    let mut worst = Map::new();
    for kind in ScheduleKind::ALL {
        let schedule = cfg
            .schedule
            .build_kind(kind)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let steps = schedule.steps();
        let mut max = 0.0f64;
        for t in (1..=steps).rev() {
            let overridden = (kind == cfg.schedule.kind)
                .then(|| cfg.coefficient_overrides.iter().rev().find(|o| o.step == t))
                .flatten();
            let c = match overridden {
                Some(o) => o.coefficients(),
                None => raw_coefficients(&schedule, t)?,
            };
            let r = c.duality_residuals();
            let m = r.max_abs();
            max = if m.is_nan() { f64::NAN } else { max.max(m) };
            out.steps.push(Row {
                error: Some(m),
                ..coefficient_row(kind.name(), steps - t, t, &c)
            });
            if !r.holds() {
                out.failures.push(format!(
                    "coefficient duality violated for {} at step t={t}: |A⁻¹B + C| = {:e}, |AC + B| = {:e}",
                    kind.name(),
                    r.r1.abs(),
                    r.r2.abs()
                ));
            }
        }
        out.report
            .push(format!("{:<10} worst duality residual {max:.3e} over {steps} steps", kind.name()));
        worst.insert(kind.name().into(), json!(max));
    }
    out.summary.insert("worst_residual".into(), Value::Object(worst));
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct CollapseCase {
    kind: ScheduleKind,
    gamma1: f64,
    /// `‖x̃ − Ψ(Φ(x; ε(x, γ₁)); ε(x, 0))‖ / (1 + ‖x‖)`
    translation: f64,
    /// `‖Φ(x̃; ε̃) − Φ(x; ε̃ + γ₁Δε)‖ / (1 + ‖x‖)`
    forward: f64,
    cross_checked: bool,
}

fn normal_vector(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal))
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn collapse_case(seed: u64, index: usize, dim: usize) -> Result<CollapseCase, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let kind = ScheduleKind::ALL[rng.random_range(0..3)];
    let steps = rng.random_range(1..=100);
    let schedule = random_schedule(kind, steps, &mut rng)?;
    let t = rng.random_range(1..=steps);
    let c = coefficients(&schedule, t)?;
    // every tenth case is unguided
    let gamma1 = if index.is_multiple_of(10) { 0.0 } else { rng.random_range(0.0..=12.0) };
    let x = normal_vector(&mut rng, dim);
    let eps_uncond = normal_vector(&mut rng, dim);
    let eps_cond = normal_vector(&mut rng, dim);
    let eps_tilde = normal_vector(&mut rng, dim);
    let scale = 1.0 + norm(&x);

    let state = LatentState::new(x, t);
    let pred = GuidedPrediction::new(eps_uncond, eps_cond, gamma1);
    let x_tilde = implicit_collapse(&state, &c, &pred)?;
    let stepped = forward_step(&c, &state, pred.guided.view())?;
    let returned = inverse_step(&c, &stepped, pred.at_scale(0.0).view())?;
    let translation = norm(&(&x_tilde.x - &returned.x)) / scale;

    let pred_tilde = GuidedPrediction {
        guided: eps_tilde.clone(),
        ..pred.clone()
    };
    let cross_checked =
        collapsed_forward(&state, &c, &x_tilde, &pred_tilde, pred.delta_eps.view(), gamma1).is_ok();
    let via_tilde = forward_step(&c, &x_tilde, eps_tilde.view())?;
    let shifted = &eps_tilde + &(gamma1 * &pred.delta_eps);
    let via_anchor = forward_step(&c, &state, shifted.view())?;
    let forward = norm(&(&via_tilde.x - &via_anchor.x)) / scale;
    Ok(CollapseCase {
        kind,
        gamma1,
        translation,
        forward,
        cross_checked,
    })
}

pub fn collapse_check(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let spec = cfg.collapse.unwrap_or_default();
    let seed = cfg.seed;
    let cases: Vec<CollapseCase> = (0..spec.cases)
        .into_par_iter()
        .map(|i| collapse_case(seed, i, spec.dim))
        .collect::<Result<_, _>>()?;

    let mut out = Outcome::default();
    let mut by_kind = Map::new();
    for kind in ScheduleKind::ALL {
        let of_kind: Vec<&CollapseCase> = cases.iter().filter(|c| c.kind == kind).collect();
        let max_t = of_kind.iter().map(|c| c.translation).fold(0.0, f64::max);
        let max_f = of_kind.iter().map(|c| c.forward).fold(0.0, f64::max);
        for (name, v) in [("translation", max_t), ("forward", max_f)] {
            out.steps.push(Row {
                error: Some(v),
                ..Row::series(format!("{name}:{}", kind.name()))
            });
        }
        out.report.push(format!(
            "{:<10} {:>5} cases  max translation deviation {max_t:.3e}  max forward deviation {max_f:.3e}",
            kind.name(),
            of_kind.len()
        ));
        by_kind.insert(
            kind.name().into(),
            json!({"cases": of_kind.len(), "max_translation": max_t, "max_forward": max_f}),
        );
    }
    let max_t = cases.iter().map(|c| c.translation).fold(0.0, f64::max);
    let max_f = cases.iter().map(|c| c.forward).fold(0.0, f64::max);
    let unguided_f = cases
        .iter()
        .filter(|c| c.gamma1 == 0.0)
        .map(|c| c.forward)
        .fold(0.0, f64::max);
    let rejected = cases.iter().filter(|c| !c.cross_checked).count();
    if !(max_t <= COLLAPSE_LIMIT) {
        out.failures.push(format!(
            "implicit collapse to a single translation: max deviation {max_t:e} > {COLLAPSE_LIMIT:e}"
        ));
    }
    if !(max_f <= COLLAPSE_LIMIT) {
        out.failures.push(format!(
            "collapsed step as a forward step: max deviation {max_f:e} > {COLLAPSE_LIMIT:e}"
        ));
    }
    if unguided_f != 0.0 {
        out.failures.push(format!(
            "collapsed step as a forward step: unguided cases deviate by {unguided_f:e}, expected exactly 0"
        ));
    }
    if rejected > 0 {
        out.failures.push(format!(
            "collapsed step as a forward step: library cross-check rejected {rejected} cases"
        ));
    }
    out.summary.insert("cases".into(), spec.cases.into());
    out.summary.insert("dim".into(), spec.dim.into());
    out.summary.insert("max_translation_deviation".into(), max_t.into());
    out.summary.insert("max_forward_deviation".into(), max_f.into());
    out.summary.insert("unguided_max_forward_deviation".into(), unguided_f.into());
    out.summary.insert("by_kind".into(), Value::Object(by_kind));
    Ok(out)
}

fn sweep_inputs(cfg: &ExperimentConfig, span: &Span) -> Result<Vec<f64>, CliError> {
    let hs = cfg.step_sizes();
    check_step_list(&hs).map_err(|e| CliError::Config(e.to_string()))?;
    for &h in &hs {
        span.steps_for(h).map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(hs)
}

fn field_and_start(cfg: &ExperimentConfig) -> Result<(MixtureField, Array1<f64>), CliError> {
    let field = cfg.fields.build().map_err(|e| CliError::Config(e.to_string()))?;
    let start = initial_noise(field.dim(), cfg.seed);
    Ok((field, start))
}

fn fit_summary(fit: &OrderFit) -> Value {
    json!({
        "slope": fit.slope,
        "intercept": fit.intercept,
        "r_squared": fit.r_squared,
        "dropped_largest": fit.dropped_largest,
    })
}

fn check_order(out: &mut Outcome, label: &str, fit: &OrderFit, lo: f64, hi: f64) {
    out.report.push(format!(
        "{label}: slope {:.3} (r² {:.4}, {} largest h dropped)",
        fit.slope, fit.r_squared, fit.dropped_largest
    ));
    if !(lo..=hi).contains(&fit.slope) {
        out.failures
            .push(format!("{label}: slope {:.4} outside [{lo}, {hi}]", fit.slope));
    }
    if !fit.is_reliable() {
        out.failures
            .push(format!("{label}: r² {:.4} below 0.95", fit.r_squared));
    }
}

pub fn order_sweep(cfg: &ExperimentConfig, exact_surrogate: bool) -> Result<Outcome, CliError> {
    let span = cfg.span();
    let hs = sweep_inputs(cfg, &span)?;
    let (field, start) = field_and_start(cfg)?;
    let gamma1 = cfg.sampler.gamma1;
    let mut points: Vec<SweepPoint> = hs
        .par_iter()
        .map(|&h| surrogate_sweep_point(&field, &span, h, gamma1, start.view(), exact_surrogate))
        .collect::<Result<_, _>>()?;
    points.sort_by(|a, b| b.h.total_cmp(&a.h));

    let mut out = Outcome::default();
    for p in &points {
        for (series, e) in [("e_tss", p.median_e_tss), ("lte", p.median_lte)] {
            out.steps.push(Row {
                h: Some(p.h),
                error: Some(e),
                e_tss: (series == "e_tss").then_some(e),
                ..Row::series(series)
            });
        }
    }
    let fits = [
        ("e_tss", "surrogate error order", e_tss_fit(&points), E_TSS_SLOPE),
        ("lte", "local truncation error order", lte_fit(&points), LTE_SLOPE),
    ];
    let mut summary = Map::new();
    for (series, label, fit, (lo, hi)) in fits {
        match (fit, exact_surrogate) {
            (Ok(fit), false) => {
                check_order(&mut out, label, &fit, lo, hi);
                out.fits.extend(fit_rows(series, &fit));
                summary.insert(series.into(), fit_summary(&fit));
            }
            (Err(e), true) if e.to_string().contains("degenerate") => {
                out.report.push(format!("{label}: degenerate fit, as expected with the exact surrogate"));
                summary.insert(series.into(), json!({"degenerate": true}));
            }
            (Ok(fit), true) => {
                out.failures.push(format!(
                    "{label}: exact surrogate should leave only round-off, got slope {:.3}",
                    fit.slope
                ));
                summary.insert(series.into(), fit_summary(&fit));
            }
            (Err(e), _) => {
                out.failures.push(format!("{label}: {e}"));
                summary.insert(series.into(), json!({"error": e.to_string()}));
            }
        }
    }
    out.summary.insert("exact_surrogate".into(), exact_surrogate.into());
    out.summary.insert("gamma1".into(), gamma1.into());
    out.summary.insert("span".into(), json!(span));
    out.summary.insert("fits".into(), Value::Object(summary));
    Ok(out)
}

pub fn bea_check(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let span = cfg.span.unwrap_or(Span::new(ScheduleKind::Flow, 0.1, 0.9));
    if span.kind != ScheduleKind::Flow {
        return Err(CliError::Config("bea-check needs a flow span".into()));
    }
    let hs = sweep_inputs(cfg, &span)?;
    let (field, start) = field_and_start(cfg)?;
    let gamma1 = cfg.sampler.gamma1;
    let jobs: Vec<(f64, f64)> = [gamma1, 0.0]
        .iter()
        .flat_map(|&g| hs.iter().map(move |&h| (g, h)))
        .collect();
    let points = jobs
        .par_iter()
        .map(|&(g, h)| bea_point(&field, &span, h, g, start.view()).map(|p| (g, p)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = Outcome::default();
    let mut summary = Map::new();
    for (g, role) in [(gamma1, "guided"), (0.0, "control")] {
        let mut pts: Vec<_> = points.iter().filter(|(pg, _)| *pg == g).map(|(_, p)| *p).collect();
        pts.sort_by(|a, b| b.h.total_cmp(&a.h));
        let series = format!("bea:gamma1={g}");
        for p in &pts {
            out.steps.push(Row {
                h: Some(p.h),
                error: Some(p.deviation),
                ..Row::series(series.clone())
            });
            out.steps.push(Row {
                h: Some(p.h),
                error: Some(p.euler_deviation),
                ..Row::series(format!("euler:gamma1={g}"))
            });
        }
        let sweep = match BeaSweep::from_points(pts) {
            Ok(s) => s,
            Err(e) => {
                out.failures.push(format!("effective vector field agreement ({role}): {e}"));
                continue;
            }
        };
        out.fits.extend(fit_rows(&series, &sweep.fit));
        let label = format!("effective vector field agreement, γ₁ = {g}");
        out.report.push(format!(
            "{label}: slope {:.3} (r² {:.4})",
            sweep.fit.slope, sweep.fit.r_squared
        ));
        if role == "guided" {
            if !(sweep.fit.slope >= BEA_MIN_SLOPE) {
                out.failures.push(format!(
                    "{label}: deviation order {:.4} below {BEA_MIN_SLOPE}",
                    sweep.fit.slope
                ));
            }
            if !sweep.fit.is_reliable() {
                out.failures
                    .push(format!("{label}: r² {:.4} below 0.95", sweep.fit.r_squared));
            }
        }
        summary.insert(
            role.into(),
            json!({
                "gamma1": g,
                "fit": fit_summary(&sweep.fit),
                "euler_fit": sweep.euler_fit.as_ref().map(fit_summary),
            }),
        );
    }
    out.summary.insert("span".into(), json!(span));
    out.summary.insert("fits".into(), Value::Object(summary));
    Ok(out)
}

/// `(label, config)` per swept value in ascending order; one unlabelled
/// entry without a sweep.
fn sample_configs(cfg: &ExperimentConfig) -> Result<Vec<(Option<String>, SamplerConfig)>, CliError> {
    let Some(sweep) = &cfg.sweep else {
        return Ok(vec![(None, cfg.sampler)]);
    };
    let mut values = sweep.values.clone();
    values.sort_by(|a, b| a.total_cmp(b));
    values.dedup();
    values
        .iter()
        .map(|&v| match sweep.parameter {
            SweepParameter::Lambda => Ok((
                Some(format!("lambda={v}")),
                cfg.sampler.with_window(cfg.sampler.warmup, v as usize),
            )),
            SweepParameter::Gamma1 => {
                let mut c = cfg.sampler;
                c.gamma1 = v;
                Ok((Some(format!("gamma1={v}")), c))
            }
            SweepParameter::H => Err(CliError::Config("sample sweeps lambda or gamma1, not h".into())),
        })
        .collect()
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn trajectory_rows(label: &str, rec: &TrajectoryRecord) -> Vec<Row> {
    rec.per_step
        .iter()
        .enumerate()
        .map(|(k, d)| Row {
            tau_norm: d.tau_norm,
            e_tss: d.e_tss,
            cos_sim: d.cos_sim,
            ..coefficient_row(label, k, d.t, &d.coefficients)
        })
        .collect()
}

pub fn sample(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let schedule = cfg.schedule.build().map_err(|e| CliError::Config(e.to_string()))?;
    let field = cfg.fields.build().map_err(|e| CliError::Config(e.to_string()))?;
    let configs = sample_configs(cfg)?;
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| (0..cfg.runs as u64).map(move |r| (i, cfg.seed + r)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(i, seed)| run_trajectory(configs[i].1, &schedule, &field, None, seed))
        .collect::<Result<Vec<_>, _>>()?;

    let data_end = schedule.point(0);
    let mut out = Outcome::default();
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&(i, seed), rec) in jobs.iter().zip(&records) {
        let label = match &configs[i].0 {
            Some(l) => format!("{l}/seed={seed}"),
            None => format!("seed={seed}"),
        };
        out.steps.extend(trajectory_rows(&label, rec));
        let expected = configs[i].1.expected_nfe(schedule.steps());
        if rec.nfe != expected {
            out.failures.push(format!(
                "NFE count for {label}: {} evaluations, expected {expected}",
                rec.nfe
            ));
        }
        let density = field
            .conditional_log_density(data_end, rec.terminal().x.view())
            .ok_or_else(|| CliError::Config("field has no conditional density".into()))?;
        groups.entry(i).or_default().push(density);
    }

    let mut results = Vec::new();
    let mut means = Vec::new();
    for (i, densities) in &groups {
        let (label, c) = &configs[*i];
        let (mean, se) = mean_and_se(densities);
        let nfe = c.expected_nfe(schedule.steps());
        out.report.push(format!(
            "{:<16} nfe {nfe:>4}  mean log-density {mean:.4} ± {se:.4} over {} runs",
            label.as_deref().unwrap_or(c.variant.name()),
            densities.len()
        ));
        means.push((label.clone(), mean, se));
        results.push(json!({
            "label": label,
            "variant": c.variant.name(),
            "gamma1": c.gamma1,
            "warmup": c.warmup,
            "zigzag_steps": c.zigzag_steps,
            "nfe": nfe,
            "runs": densities.len(),
            "mean_log_density": mean,
            "standard_error": se,
        }));
    }
    if cfg.sweep.as_ref().is_some_and(|s| s.parameter == SweepParameter::Lambda) {
        let mut order: Vec<usize> = (0..means.len()).collect();
        let lambda = |i: usize| configs[i].1.zigzag_steps;
        order.sort_by_key(|&i| lambda(i));
        for w in order.windows(2) {
            let (a, b) = (&means[w[0]], &means[w[1]]);
            if b.1 < a.1 - a.2.max(b.2) {
                out.failures.push(format!(
                    "log-density proxy decreases from λ={} ({:.4}) to λ={} ({:.4}) beyond one standard error",
                    lambda(w[0]),
                    a.1,
                    lambda(w[1]),
                    b.1
                ));
            }
        }
    }
    out.summary.insert("variant".into(), cfg.sampler.variant.name().into());
    out.summary.insert("steps".into(), schedule.steps().into());
    out.summary.insert("runs".into(), cfg.runs.into());
    out.summary.insert("proxy".into(), PROXY_LABEL.into());
    out.summary.insert("results".into(), Value::Array(results));
    Ok(out)
}
