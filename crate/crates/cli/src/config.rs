//! Experiment specifications in TOML.
//!
//! Every table rejects unknown keys. Missing keys take the defaults listed in
//! the README. The canonical form of a spec is its re-serialization, and the
//! SHA-256 of that text is the `config_hash` stamped into every output file.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spde_averaging_core::measure::{DriftEstimator, ErgodicConfig, PcnConfig};
use spde_averaging_core::multiscale::SimConfig;
use spde_averaging_core::{BoundaryCondition, Field, OperatorSpectrum, ReactionFn, ReactionSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Validate,
    Fast,
    Invariant,
    Coupled,
    Average,
    Converge,
    Remainder,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Validate => "validate",
            ExperimentKind::Fast => "fast",
            ExperimentKind::Invariant => "invariant",
            ExperimentKind::Coupled => "coupled",
            ExperimentKind::Average => "average",
            ExperimentKind::Converge => "converge",
            ExperimentKind::Remainder => "remainder",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "validate" => ExperimentKind::Validate,
            "fast" => ExperimentKind::Fast,
            "invariant" => ExperimentKind::Invariant,
            "coupled" => ExperimentKind::Coupled,
            "average" => ExperimentKind::Average,
            "converge" => ExperimentKind::Converge,
            "remainder" => ExperimentKind::Remainder,
            other => return Err(format!("unknown experiment kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Dirichlet,
    ShiftedNeumann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_boundary")]
    pub boundary: Boundary,
    /// Mass of the shifted Neumann operator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    #[serde(default = "default_modes")]
    pub n_modes: usize,
}

impl Default for OperatorSpec {
    fn default() -> Self {
        Self {
            length: default_length(),
            boundary: default_boundary(),
            mass: None,
            n_modes: default_modes(),
        }
    }
}

impl OperatorSpec {
    pub fn build(&self) -> Result<OperatorSpectrum, SpecError> {
        let bc = match (self.boundary, self.mass) {
            (Boundary::Dirichlet, None) => BoundaryCondition::Dirichlet,
            (Boundary::Dirichlet, Some(_)) => {
                return Err(SpecError::semantic("mass", "only the shifted_neumann operator takes a mass"))
            }
            (Boundary::ShiftedNeumann, Some(mass)) => BoundaryCondition::ShiftedNeumann { mass },
            (Boundary::ShiftedNeumann, None) => {
                return Err(SpecError::semantic("mass", "shifted_neumann needs `mass`"))
            }
        };
        OperatorSpectrum::build(self.length, bc, self.n_modes).map_err(SpecError::Core)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactionSpec {
    /// Slow reaction `f(ξ, σ1, σ2)` as a catalog expression.
    pub f: String,
    /// Fast reaction `g(ξ, σ1, σ2)`.
    pub g: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub eps: f64,
    /// Strictly decreasing `ε` values for `converge` and `remainder`.
    pub eps_grid: Vec<f64>,
    pub horizon: f64,
    pub dt_slow: f64,
    pub dt_fast: f64,
    pub replicas: usize,
    pub seed: u64,
    pub eta: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            eps: d.eps,
            eps_grid: vec![1.0, 0.1, 0.01],
            horizon: d.horizon,
            dt_slow: d.dt_slow,
            dt_fast: d.dt_fast,
            replicas: d.replicas,
            seed: d.seed,
            eta: d.eta,
        }
    }
}

/// Leading coefficients of the initial data; missing modes are zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSpec {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    ClosedForm,
    Pcn,
    Ergodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureSpec {
    pub estimator: EstimatorKind,
    pub n_samples: usize,
    pub beta: f64,
    pub adapt_steps: usize,
    pub target_acceptance: f64,
    pub min_burn_in: usize,
    pub thin: usize,
    /// Ergodic estimator step and sampling window, in fast time.
    pub dt: f64,
    pub t_sample: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_burn: Option<f64>,
    /// Relative distance below which a cached `F̄` is reused.
    pub cache_tolerance: f64,
}

impl Default for MeasureSpec {
    fn default() -> Self {
        let p = PcnConfig::default();
        Self {
            estimator: EstimatorKind::Pcn,
            n_samples: p.n_samples,
            beta: p.beta,
            adapt_steps: p.adapt_steps,
            target_acceptance: p.target_acceptance,
            min_burn_in: p.min_burn_in,
            thin: p.thin,
            dt: 0.05,
            t_sample: 1000.0,
            t_burn: None,
            cache_tolerance: 0.01,
        }
    }
}

impl MeasureSpec {
    pub fn pcn(&self) -> PcnConfig {
        PcnConfig {
            n_samples: self.n_samples,
            beta: self.beta,
            adapt_steps: self.adapt_steps,
            target_acceptance: self.target_acceptance,
            min_burn_in: self.min_burn_in,
            thin: self.thin,
        }
    }

    pub fn ergodic(&self) -> ErgodicConfig {
        ErgodicConfig {
            dt: self.dt,
            t_burn: self.t_burn,
            t_sample: self.t_sample,
            thin: self.thin,
        }
    }

    pub fn estimator(&self, seed: u64) -> DriftEstimator {
        match self.estimator {
            EstimatorKind::ClosedForm => DriftEstimator::ClosedForm,
            EstimatorKind::Pcn => DriftEstimator::Pcn { cfg: self.pcn(), seed },
            EstimatorKind::Ergodic => DriftEstimator::Ergodic {
                cfg: self.ergodic(),
                seed,
            },
        }
    }
}

/// Settings of the `fast` experiment (fast time units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FastSpec {
    pub horizon: f64,
    pub dt: f64,
    pub record_every: usize,
    pub moment: f64,
}

impl Default for FastSpec {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            dt: 0.05,
            record_every: 10,
            moment: 2.0,
        }
    }
}

/// Test direction `h` for the remainder, on the slow basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    pub h: Vec<f64>,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { h: vec![1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default = "default_output")]
    pub output: String,
    /// The fast operator `B`.
    #[serde(default)]
    pub operator: OperatorSpec,
    /// The slow operator `A`; `B` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slow_operator: Option<OperatorSpec>,
    pub reaction: ReactionSpec,
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub measure: MeasureSpec,
    #[serde(default)]
    pub fast: FastSpec,
    #[serde(default)]
    pub probe: ProbeSpec,
}

fn default_length() -> f64 {
    std::f64::consts::PI
}

fn default_boundary() -> Boundary {
    Boundary::Dirichlet
}

fn default_modes() -> usize {
    8
}

fn default_output() -> String {
    "out".into()
}

/// Configuration failures; [`SpecError::is_hypothesis_violation`] separates
/// gate failures from malformed input.
#[derive(Debug)]
pub enum SpecError {
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    Semantic {
        key: String,
        message: String,
    },
    Core(spde_averaging_core::Error),
}

impl SpecError {
    fn semantic(key: &str, message: impl Into<String>) -> Self {
        SpecError::Semantic {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn is_hypothesis_violation(&self) -> bool {
        matches!(self, SpecError::Core(e) if e.is_hypothesis_violation())
    }
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecError::Parse { line, column, message } => write!(f, "{line}:{column}: {message}"),
            SpecError::Semantic { key, message } => write!(f, "`{key}`: {message}"),
            SpecError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SpecError {}

/// 1-based line and column of a byte offset.
fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

pub fn parse_config(text: &str) -> Result<ExperimentSpec, SpecError> {
    let spec: ExperimentSpec = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
        SpecError::Parse {
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })?;
    spec.check()?;
    Ok(spec)
}

impl ExperimentSpec {
    /// Canonical text; parsing it yields an equal spec.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("specs always serialize")
    }

    /// SHA-256 of the canonical text, hex encoded. The output directory is
    /// blanked first so relocated runs share a hash.
    pub fn hash(&self) -> String {
        let canonical = ExperimentSpec {
            output: String::new(),
            ..self.clone()
        };
        hex(&Sha256::digest(canonical.to_toml().as_bytes()))
    }

    fn check(&self) -> Result<(), SpecError> {
        self.reaction_fns()?;
        if self.sim.eps_grid.windows(2).any(|w| w[1] >= w[0]) || self.sim.eps_grid.iter().any(|e| !(*e > 0.0)) {
            return Err(SpecError::semantic("sim.eps_grid", "must be positive and strictly decreasing"));
        }
        self.sim_config(self.sim.eps)
            .validate()
            .map_err(|e| SpecError::semantic("sim", e.to_string()))?;
        if !(self.measure.beta > 0.0 && self.measure.beta < 1.0) {
            return Err(SpecError::semantic("measure.beta", "must lie in (0, 1)"));
        }
        if ![1.0, 2.0, 4.0].contains(&self.fast.moment) {
            return Err(SpecError::semantic("fast.moment", "must be 1, 2 or 4"));
        }
        Ok(())
    }

    fn reaction_fns(&self) -> Result<(ReactionFn, ReactionFn), SpecError> {
        let parse = |key: &str, s: &str| {
            s.parse::<ReactionFn>()
                .map_err(|e| SpecError::semantic(key, e.to_string()))
        };
        Ok((parse("reaction.f", &self.reaction.f)?, parse("reaction.g", &self.reaction.g)?))
    }

    pub fn sim_config(&self, eps: f64) -> SimConfig {
        SimConfig {
            eps,
            horizon: self.sim.horizon,
            dt_slow: self.sim.dt_slow,
            dt_fast: self.sim.dt_fast,
            n_modes: self.operator.n_modes,
            replicas: self.sim.replicas,
            seed: self.sim.seed,
            eta: self.sim.eta,
        }
    }

    /// Builds `(A, r)` and runs the hypothesis gate.
    pub fn build(&self) -> Result<System, SpecError> {
        let fast = self.operator.build()?;
        let slow = match &self.slow_operator {
            Some(s) => s.build()?,
            None => fast.clone(),
        };
        let (f, g) = self.reaction_fns()?;
        let reaction = ReactionSystem::new(f, g, &fast, slow.basis()).map_err(SpecError::Core)?;
        let x0 = leading(&self.initial.x, &slow, "initial.x")?;
        let y0 = leading(&self.initial.y, &fast, "initial.y")?;
        let h = leading(&self.probe.h, &slow, "probe.h")?;
        Ok(System {
            slow,
            reaction,
            x0,
            y0,
            h,
        })
    }
}

fn leading(c: &[f64], s: &OperatorSpectrum, key: &str) -> Result<Field, SpecError> {
    if c.len() > s.n_modes() {
        return Err(SpecError::semantic(key, format!("{} coefficients for {} modes", c.len(), s.n_modes())));
    }
    Ok(Field::from_leading(s.basis(), c))
}

/// Everything an experiment needs, validated.
#[derive(Debug, Clone)]
pub struct System {
    pub slow: OperatorSpectrum,
    pub reaction: ReactionSystem,
    pub x0: Field,
    pub y0: Field,
    pub h: Field,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a field's coefficients (little-endian bytes).
pub fn field_hash(x: &Field) -> String {
    let mut h = Sha256::new();
    for c in x.coeffs() {
        h.update(c.to_le_bytes());
    }
    hex(&h.finalize())
}
