//! JSON experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use z2_core::analysis::Span;
use z2_core::schedule::{make_linear_vp, vp_to_spherical};
use z2_core::{
    GaussianComponent, Mixture, MixtureField, SamplerConfig, Schedule, ScheduleKind,
    SolverCoefficients, Variant,
};

use crate::CliError;

pub const DEFAULT_ALPHA_START: f64 = 0.9999;
pub const DEFAULT_ALPHA_END: f64 = 0.0047;
pub const DEFAULT_SIGMA_MAX: f64 = 1.0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default)]
    pub params: ScheduleParams,
}

impl ScheduleSpec {
    pub fn build(&self) -> z2_core::Result<Schedule> {
        self.build_kind(self.kind)
    }

    /// The schedule for `kind` from the same `T` and parameters. Spherical
    /// schedules are the angle form of the VP one.
    pub fn build_kind(&self, kind: ScheduleKind) -> z2_core::Result<Schedule> {
        let p = &self.params;
        let vp = || {
            make_linear_vp(
                self.steps,
                p.alpha_start.unwrap_or(DEFAULT_ALPHA_START),
                p.alpha_end.unwrap_or(DEFAULT_ALPHA_END),
            )
        };
        match kind {
            ScheduleKind::Vp => vp(),
            ScheduleKind::Spherical => vp_to_spherical(&vp()?),
            ScheduleKind::Flow => Schedule::flow_range(
                self.steps,
                p.sigma_min.unwrap_or(0.0),
                p.sigma_max.unwrap_or(DEFAULT_SIGMA_MAX),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub components: Vec<GaussianComponent>,
    pub conditional_index: usize,
}

impl FieldSpec {
    pub fn build(&self) -> z2_core::Result<MixtureField> {
        MixtureField::from_designated(Mixture::new(self.components.clone())?, self.conditional_index)
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    H,
    Lambda,
    Gamma1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

/// Replaces the computed triple at `step` of the configured schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientOverride {
    pub step: usize,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

impl CoefficientOverride {
    pub fn coefficients(&self) -> SolverCoefficients {
        SolverCoefficients::from_raw(self.a, self.b, self.c, self.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseSpec {
    #[serde(default = "default_cases")]
    pub cases: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

impl Default for CollapseSpec {
    fn default() -> Self {
        Self {
            cases: default_cases(),
            dim: default_dim(),
        }
    }
}

fn default_cases() -> usize {
    10_000
}

fn default_dim() -> usize {
    64
}

fn default_runs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ScheduleSpec,
    pub fields: FieldSpec,
    pub sampler: SamplerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    pub seed: u64,
    pub output: String,
    /// Seeds per sampling run, starting at `seed`.
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Interval swept by order-sweep and bea-check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Span>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coefficient_overrides: Vec<CoefficientOverride>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapse: Option<CollapseSpec>,
}

impl Default for ExperimentConfig {
    /// Two overlapping modes in the plane, the first designated as the
    /// conditional, sampled on a 50-step flow schedule.
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec {
                kind: ScheduleKind::Flow,
                steps: 50,
                params: ScheduleParams::default(),
            },
            fields: FieldSpec {
                components: vec![
                    GaussianComponent::new(vec![1.0, 0.0], 0.5, 0.5),
                    GaussianComponent::new(vec![-1.0, 0.0], 0.5, 0.5),
                ],
                conditional_index: 0,
            },
            sampler: SamplerConfig::new(Variant::ZSquared, 0.5).with_window(5, 44),
            sweep: None,
            seed: 0,
            output: "z2".into(),
            runs: 1,
            span: None,
            coefficient_overrides: Vec::new(),
            collapse: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks every section before any run starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: z2_core::Error| CliError::Config(e.to_string());
        for kind in ScheduleKind::ALL {
            self.schedule.build_kind(kind).map_err(cfg_err)?;
        }
        self.fields.build().map_err(cfg_err)?;
        let steps = self.schedule.steps;
        self.sampler.validate(steps).map_err(cfg_err)?;
        if self.runs == 0 {
            return Err(CliError::Config("runs must be >= 1".into()));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() || sweep.values.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Config("sweep values must be finite and non-empty".into()));
            }
            if sweep.parameter == SweepParameter::Lambda {
                for &v in &sweep.values {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(CliError::Config(format!(
                            "lambda sweep values must be non-negative integers, got {v}"
                        )));
                    }
                    let cfg = self.sampler.with_window(self.sampler.warmup, v as usize);
                    cfg.validate(steps).map_err(cfg_err)?;
                }
            }
        }
        if let Some(span) = &self.span {
            if !(span.low >= 0.0 && span.high > span.low && span.high.is_finite()) {
                return Err(CliError::Config(format!(
                    "span must satisfy 0 <= low < high, got [{}, {}]",
                    span.low, span.high
                )));
            }
        }
        for o in &self.coefficient_overrides {
            if o.step == 0 || o.step > steps {
                return Err(CliError::Config(format!(
                    "coefficient override step {} outside 1..={steps}",
                    o.step
                )));
            }
        }
        if let Some(c) = &self.collapse {
            if c.cases == 0 || c.dim == 0 {
                return Err(CliError::Config("collapse cases and dim must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn span(&self) -> Span {
        self.span.unwrap_or(match self.schedule.kind {
            ScheduleKind::Flow => Span::new(ScheduleKind::Flow, 0.1, 0.9),
            kind => Span::new(kind, 0.2, 1.0),
        })
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        match &self.sweep {
            Some(s) if s.parameter == SweepParameter::H => s.values.clone(),
            _ => vec![0.1, 0.05, 0.025, 0.0125, 0.00625],
        }
    }
}
