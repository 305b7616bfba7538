//! TOML run configuration.
//!
//! A config is one document with top-level run parameters and the sections
//! `[coefficients]`, `[terminal]`, `[tolerances]`, `[control]` and
//! `[output]`. Unknown keys are rejected everywhere. Matrices are written as
//! arrays of rows, or as a bare number meaning that multiple of the identity.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use singular_lq::coeffmodel::{
    make_umi_eta, CoefficientSet, MartingaleSpec, MatrixProcess, ModelError, NodeField,
    ScenarioTree, TimeGrid, UmiEta, UmiGenerator,
};
use singular_lq::matcore::{kernel_projection, SymMatrix};
use singular_lq::riccati::{default_schedule, OdeSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Solve,
    Ladder,
    Singular,
    Umi,
    Expansion,
    Control,
    Audit,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Ladder => "ladder",
            Command::Singular => "singular",
            Command::Umi => "umi",
            Command::Expansion => "expansion",
            Command::Control => "control",
            Command::Audit => "audit",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixValue {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixValue {
    fn shape_error(&self, d: usize, symmetric: bool) -> Option<String> {
        match self {
            MatrixValue::Scalar(v) if !v.is_finite() => Some("entry is not finite".into()),
            MatrixValue::Scalar(_) => None,
            MatrixValue::Rows(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    let cols = rows.first().map_or(0, |r| r.len());
                    return Some(format!(
                        "expected a {d}x{d} matrix, found {}x{cols}",
                        rows.len()
                    ));
                }
                if rows.iter().flatten().any(|v| !v.is_finite()) {
                    return Some("entry is not finite".into());
                }
                let asymmetric = (0..d).any(|i| (0..i).any(|j| rows[i][j] != rows[j][i]));
                if symmetric && asymmetric {
                    return Some("matrix is not symmetric".into());
                }
                None
            }
        }
    }

    pub fn matrix(&self, d: usize) -> DMatrix<f64> {
        match self {
            MatrixValue::Scalar(v) => DMatrix::identity(d, d) * *v,
            MatrixValue::Rows(rows) => DMatrix::from_fn(d, d, |i, j| rows[i][j]),
        }
    }

    pub fn symmetric(&self, d: usize) -> Result<SymMatrix, ModelError> {
        SymMatrix::from_upper(self.matrix(d)).map_err(ModelError::Mat)
    }
}

/// A coefficient that is the same on every tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant {
        value: MatrixValue,
    },
    /// `values[k]` holds on `[breaks[k-1], breaks[k])`; an interval takes
    /// the value in force at its left end.
    Piecewise {
        breaks: Vec<f64>,
        values: Vec<MatrixValue>,
    },
}

impl FieldSpec {
    fn zero() -> Self {
        FieldSpec::Constant {
            value: MatrixValue::Scalar(0.0),
        }
    }

    fn check(
        &self,
        path: &str,
        d: usize,
        symmetric: bool,
        horizon: f64,
        errors: &mut Vec<FieldError>,
    ) {
        let check = |p: String, m: &MatrixValue, errors: &mut Vec<FieldError>| {
            check_matrix(&p, m, d, symmetric, errors)
        };
        match self {
            FieldSpec::Constant { value } => check(format!("{path}.value"), value, errors),
            FieldSpec::Piecewise { breaks, values } => {
                let inside = breaks.iter().all(|b| *b > 0.0 && *b < horizon);
                if !inside || !strictly_increasing(breaks) {
                    errors.push(FieldError::new(
                        format!("{path}.breaks"),
                        "breaks must be strictly increasing and inside (0, horizon)",
                    ));
                }
                if values.len() != breaks.len() + 1 {
                    errors.push(FieldError::new(
                        format!("{path}.values"),
                        format!(
                            "expected {} values, found {}",
                            breaks.len() + 1,
                            values.len()
                        ),
                    ));
                }
                for (k, v) in values.iter().enumerate() {
                    check(format!("{path}.values[{k}]"), v, errors);
                }
            }
        }
    }

    /// One matrix per grid interval.
    fn per_interval(&self, grid: &TimeGrid, d: usize) -> Vec<DMatrix<f64>> {
        (0..grid.steps())
            .map(|j| match self {
                FieldSpec::Constant { value } => value.matrix(d),
                FieldSpec::Piecewise { breaks, values } => {
                    let t = grid.time(j);
                    let k = breaks.iter().filter(|b| **b <= t + 1e-12).count();
                    values[k].matrix(d)
                }
            })
            .collect()
    }

    fn symmetric_field(
        &self,
        grid: &TimeGrid,
        d: usize,
    ) -> Result<NodeField<SymMatrix>, ModelError> {
        let rows = self
            .per_interval(grid, d)
            .into_iter()
            .map(|m| Ok(vec![SymMatrix::from_upper(m).map_err(ModelError::Mat)?]))
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(NodeField::new(rows))
    }

    fn general_field(&self, grid: &TimeGrid, d: usize) -> NodeField<DMatrix<f64>> {
        NodeField::new(
            self.per_interval(grid, d)
                .into_iter()
                .map(|m| vec![m])
                .collect(),
        )
    }
}

/// `η`: a deterministic field or one of the tree generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EtaSpec {
    Constant {
        value: MatrixValue,
    },
    Piecewise {
        breaks: Vec<f64>,
        values: Vec<MatrixValue>,
    },
    /// `η = up^i down^(k−i) η₀` on node `i` of layer `k`, `up + down = 2`.
    Martingale {
        eta0: MatrixValue,
        up: f64,
        down: f64,
    },
    /// `η = η₀ + (2i − k) sqrt(Δ) vol`.
    Additive {
        eta0: MatrixValue,
        vol: MatrixValue,
    },
    /// Multiplicative martingale with eigenvalues floored at `delta`.
    Stopped {
        eta0: MatrixValue,
        up: f64,
        down: f64,
        delta: f64,
    },
    /// Multiplicative martingale times `exp(g t)`.
    Drift {
        eta0: MatrixValue,
        up: f64,
        down: f64,
        g: MatrixValue,
    },
}

impl EtaSpec {
    fn as_field(&self) -> Option<FieldSpec> {
        match self {
            EtaSpec::Constant { value } => Some(FieldSpec::Constant {
                value: value.clone(),
            }),
            EtaSpec::Piecewise { breaks, values } => Some(FieldSpec::Piecewise {
                breaks: breaks.clone(),
                values: values.clone(),
            }),
            _ => None,
        }
    }

    pub fn is_generator(&self) -> bool {
        self.as_field().is_none()
    }

    fn check(&self, path: &str, d: usize, horizon: f64, errors: &mut Vec<FieldError>) {
        if let Some(f) = self.as_field() {
            f.check(path, d, true, horizon, errors);
            return;
        }
        let factors = |up: f64, down: f64, errors: &mut Vec<FieldError>| {
            if !(up > 0.0 && down > 0.0 && (up + down - 2.0).abs() <= 1e-12) {
                errors.push(FieldError::new(
                    format!("{path}.up"),
                    "up and down must be positive with up + down = 2",
                ));
            }
        };
        match self {
            EtaSpec::Martingale { eta0, up, down } => {
                check_matrix(&format!("{path}.eta0"), eta0, d, true, errors);
                factors(*up, *down, errors);
            }
            EtaSpec::Additive { eta0, vol } => {
                check_matrix(&format!("{path}.eta0"), eta0, d, true, errors);
                check_matrix(&format!("{path}.vol"), vol, d, true, errors);
            }
            EtaSpec::Stopped {
                eta0,
                up,
                down,
                delta,
            } => {
                check_matrix(&format!("{path}.eta0"), eta0, d, true, errors);
                factors(*up, *down, errors);
                if !(*delta > 0.0 && delta.is_finite()) {
                    errors.push(FieldError::new(format!("{path}.delta"), "must be positive"));
                }
            }
            EtaSpec::Drift { eta0, up, down, g } => {
                check_matrix(&format!("{path}.eta0"), eta0, d, true, errors);
                check_matrix(&format!("{path}.g"), g, d, false, errors);
                factors(*up, *down, errors);
            }
            EtaSpec::Constant { .. } | EtaSpec::Piecewise { .. } => unreachable!(),
        }
    }
}

/// `θ` or `ξ`, shared by every leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    Identity,
    Zero,
    /// Orthogonal projector onto the complement of `span(vectors)`, so the
    /// vectors span the admissible terminal subspace.
    Projector {
        vectors: Vec<Vec<f64>>,
    },
    Explicit {
        value: MatrixValue,
    },
}

impl TerminalSpec {
    fn check(&self, path: &str, d: usize, errors: &mut Vec<FieldError>) {
        match self {
            TerminalSpec::Identity | TerminalSpec::Zero => {}
            TerminalSpec::Projector { vectors } => {
                for (k, v) in vectors.iter().enumerate() {
                    if v.len() != d {
                        errors.push(FieldError::new(
                            format!("{path}.vectors[{k}]"),
                            format!(
                                "dimension mismatch: vector has {} entries, expected {d}",
                                v.len()
                            ),
                        ));
                    } else if v.iter().any(|x| !x.is_finite()) {
                        errors.push(FieldError::new(
                            format!("{path}.vectors[{k}]"),
                            "entry is not finite",
                        ));
                    }
                }
            }
            TerminalSpec::Explicit { value } => {
                check_matrix(&format!("{path}.value"), value, d, true, errors)
            }
        }
    }

    pub fn matrix(&self, d: usize) -> Result<SymMatrix, ModelError> {
        match self {
            TerminalSpec::Identity => Ok(SymMatrix::identity(d)),
            TerminalSpec::Zero => Ok(SymMatrix::zeros(d)),
            TerminalSpec::Projector { vectors } => {
                let vs: Vec<DVector<f64>> = vectors
                    .iter()
                    .map(|v| DVector::from_column_slice(v))
                    .collect();
                kernel_projection(d, &vs).map_err(ModelError::Mat)
            }
            TerminalSpec::Explicit { value } => value.symmetric(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub eta: EtaSpec,
    #[serde(default = "FieldSpec::zero")]
    pub lambda: FieldSpec,
    #[serde(default = "FieldSpec::zero")]
    pub phi: FieldSpec,
    #[serde(default = "FieldSpec::zero")]
    pub a: FieldSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Terminal {
    #[serde(default = "terminal_zero")]
    pub theta: TerminalSpec,
    #[serde(default = "terminal_identity")]
    pub xi: TerminalSpec,
}

impl Default for Terminal {
    fn default() -> Self {
        Terminal {
            theta: TerminalSpec::Zero,
            xi: TerminalSpec::Identity,
        }
    }
}

fn terminal_zero() -> TerminalSpec {
    TerminalSpec::Zero
}

fn terminal_identity() -> TerminalSpec {
    TerminalSpec::Identity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Relative tolerance of the adaptive integrator.
    pub ode_tol: f64,
    pub psd_tol: f64,
    /// Increment between ladder rungs that counts as converged.
    pub ladder_tol: f64,
    /// Allowed negative eigenvalue of `Yⁿ⁺¹ − Yⁿ`.
    pub monotone_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            ode_tol: 1e-9,
            psd_tol: 1e-10,
            ladder_tol: 1e-3,
            monotone_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSpec {
    /// Initial state; all ones when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Start time, snapped down to the grid.
    pub t0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    pub dimension: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Binomial tree depth; 0 for deterministic coefficients.
    #[serde(default)]
    pub depth: usize,
    /// Defaults to `0.05 T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Explicit penalization schedule; overrides `schedule_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<f64>>,
    /// Schedule `1, 2, 4, …, 2^schedule_max`.
    #[serde(default = "default_schedule_max")]
    pub schedule_max: u32,
    pub coefficients: Coefficients,
    #[serde(default)]
    pub terminal: Terminal,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub control: ControlSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_horizon() -> f64 {
    1.0
}

fn default_steps() -> usize {
    1000
}

fn default_schedule_max() -> u32 {
    20
}

/// Largest `schedule_max`; `2^60` is far past any useful penalization.
pub const SCHEDULE_MAX_LIMIT: u32 = 60;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("invalid config:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl ConfigError {
    pub fn field_errors(&self) -> &[FieldError] {
        match self {
            ConfigError::Invalid(e) => e,
            ConfigError::Syntax(_) => &[],
        }
    }
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn check_matrix(
    path: &str,
    m: &MatrixValue,
    d: usize,
    symmetric: bool,
    errors: &mut Vec<FieldError>,
) {
    if let Some(msg) = m.shape_error(d, symmetric) {
        errors.push(FieldError::new(path, msg));
    }
}

fn positive(path: &str, v: f64, errors: &mut Vec<FieldError>) {
    if !(v > 0.0 && v.is_finite()) {
        errors.push(FieldError::new(path, format!("must be positive, got {v}")));
    }
}

/// Parses and validates a config, filling `epsilon` with its default.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut config: RunConfig =
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    if config.epsilon.is_none() {
        config.epsilon = Some(0.05 * config.horizon);
    }
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let d = self.dimension;
        if d == 0 {
            errors.push(FieldError::new("dimension", "must be at least 1"));
        }
        positive("horizon", self.horizon, &mut errors);
        if self.steps == 0 {
            errors.push(FieldError::new("steps", "must be at least 1"));
        }
        if self.depth > self.steps {
            errors.push(FieldError::new(
                "depth",
                format!(
                    "tree depth {} exceeds grid steps {}",
                    self.depth, self.steps
                ),
            ));
        } else if self.depth > 0 && !self.steps.is_multiple_of(self.depth) {
            errors.push(FieldError::new(
                "depth",
                format!(
                    "tree depth {} does not divide grid steps {}",
                    self.depth, self.steps
                ),
            ));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps < self.horizon) {
                errors.push(FieldError::new(
                    "epsilon",
                    format!("must lie in (0, horizon), got {eps}"),
                ));
            }
        }
        if let Some(s) = &self.schedule {
            if s.is_empty() {
                errors.push(FieldError::new("schedule", "schedule is empty"));
            } else if !strictly_increasing(s) {
                errors.push(FieldError::new(
                    "schedule",
                    "schedule not strictly increasing",
                ));
            } else if s[0] <= 0.0 || !s.iter().all(|v| v.is_finite()) {
                errors.push(FieldError::new(
                    "schedule",
                    "entries must be positive and finite",
                ));
            }
        }
        if self.schedule_max > SCHEDULE_MAX_LIMIT {
            errors.push(FieldError::new(
                "schedule_max",
                format!("must be at most {SCHEDULE_MAX_LIMIT}"),
            ));
        }
        let t = &self.tolerances;
        positive("tolerances.ode_tol", t.ode_tol, &mut errors);
        positive("tolerances.psd_tol", t.psd_tol, &mut errors);
        positive("tolerances.ladder_tol", t.ladder_tol, &mut errors);
        positive("tolerances.monotone_tol", t.monotone_tol, &mut errors);
        if d > 0 {
            let c = &self.coefficients;
            c.eta
                .check("coefficients.eta", d, self.horizon, &mut errors);
            c.lambda
                .check("coefficients.lambda", d, true, self.horizon, &mut errors);
            c.phi
                .check("coefficients.phi", d, false, self.horizon, &mut errors);
            c.a.check("coefficients.a", d, false, self.horizon, &mut errors);
            if let Some(v) = c.delta {
                positive("coefficients.delta", v, &mut errors);
            }
            if let Some(v) = c.k_bound {
                positive("coefficients.k_bound", v, &mut errors);
            }
            self.terminal.theta.check("terminal.theta", d, &mut errors);
            self.terminal.xi.check("terminal.xi", d, &mut errors);
            if let Some(x0) = &self.control.x0 {
                if x0.len() != d {
                    errors.push(FieldError::new(
                        "control.x0",
                        format!("dimension mismatch: {} entries, expected {d}", x0.len()),
                    ));
                } else if x0.iter().any(|v| !v.is_finite()) {
                    errors.push(FieldError::new("control.x0", "entry is not finite"));
                }
            }
        }
        let t0 = self.control.t0;
        if !(t0 >= 0.0 && t0 < self.horizon) {
            errors.push(FieldError::new(
                "control.t0",
                format!("must lie in [0, horizon), got {t0}"),
            ));
        }
        if self.output.dir.is_empty() {
            errors.push(FieldError::new("output.dir", "must not be empty"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(0.05 * self.horizon)
    }

    pub fn schedule_values(&self) -> Vec<f64> {
        self.schedule
            .clone()
            .unwrap_or_else(|| default_schedule(self.schedule_max))
    }

    pub fn ode_settings(&self) -> OdeSettings {
        let mut s = OdeSettings::default().with_rtol(self.tolerances.ode_tol);
        s.psd_tol = self.tolerances.psd_tol;
        s
    }

    pub fn x0(&self) -> DVector<f64> {
        match &self.control.x0 {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::from_element(self.dimension, 1.0),
        }
    }

    pub fn tree(&self) -> Result<ScenarioTree, ModelError> {
        ScenarioTree::build(TimeGrid::new(self.horizon, self.steps)?, self.depth)
    }

    /// The coefficient set, with the generated `η` when a tree generator is used.
    pub fn model(&self) -> Result<(CoefficientSet, Option<UmiEta>), ModelError> {
        let d = self.dimension;
        let tree = self.tree()?;
        let grid = *tree.grid();
        let c = &self.coefficients;
        let (eta, generated) = match c.eta.as_field() {
            Some(f) => (MatrixProcess::piecewise(f.symmetric_field(&grid, d)?), None),
            None => {
                let generator = self.generator()?;
                let out = make_umi_eta(&tree, &generator)?;
                (out.eta.clone(), Some(out))
            }
        };
        let mut builder = CoefficientSet::builder(tree, d)
            .eta(eta)
            .lambda(c.lambda.symmetric_field(&grid, d)?)
            .phi(c.phi.general_field(&grid, d))
            .a(c.a.general_field(&grid, d))
            .theta(vec![self.terminal.theta.matrix(d)?])
            .xi(vec![self.terminal.xi.matrix(d)?]);
        if let Some(v) = c.delta {
            builder = builder.delta(v);
        }
        if let Some(v) = c.k_bound {
            builder = builder.k_bound(v);
        }
        Ok((builder.build()?, generated))
    }

    fn generator(&self) -> Result<UmiGenerator, ModelError> {
        let d = self.dimension;
        let mult = |eta0: &MatrixValue, up: f64, down: f64| -> Result<MartingaleSpec, ModelError> {
            Ok(MartingaleSpec::Multiplicative {
                eta0: eta0.symmetric(d)?,
                up,
                down,
            })
        };
        Ok(match &self.coefficients.eta {
            EtaSpec::Martingale { eta0, up, down } => {
                UmiGenerator::Martingale(mult(eta0, *up, *down)?)
            }
            EtaSpec::Additive { eta0, vol } => UmiGenerator::Martingale(MartingaleSpec::Additive {
                eta0: eta0.symmetric(d)?,
                vol: vol.symmetric(d)?,
            }),
            EtaSpec::Stopped {
                eta0,
                up,
                down,
                delta,
            } => UmiGenerator::StoppedMartingale {
                base: mult(eta0, *up, *down)?,
                delta: *delta,
            },
            EtaSpec::Drift { eta0, up, down, g } => UmiGenerator::MultiplicativeDrift {
                base: mult(eta0, *up, *down)?,
                g: vec![g.matrix(d)],
            },
            EtaSpec::Constant { .. } | EtaSpec::Piecewise { .. } => unreachable!(),
        })
    }
}
