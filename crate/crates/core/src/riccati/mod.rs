//! Backward solvers for the penalized Riccati equation, the penalization
//! ladder `n → ∞`, the singular limit on `[0, T − ε]`, and the bound audit.

mod audit;
mod integrator;
mod ladder;
mod solve;

pub use audit::{audit_bounds, AuditEntry, BoundAudit, BoundStatus, PATH_DEPTH_CAP};
pub(crate) use integrator::Integrator;
pub use integrator::{driver, OdeSettings, StepControl, StepStats};
pub use ladder::{
    default_schedule, penalized_ladder, singular_limit, Ladder, LadderOptions, SolverKind,
};
pub use solve::{solve_ode, solve_tree, solve_tree_from};

use serde::Serialize;
use thiserror::Error;

use crate::coeffmodel::{ModelError, NodeField, ScenarioTree};
use crate::matcore::{MatError, SymMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("step size underflow at t = {t} (step {step:e})")]
    StepUnderflow { t: f64, step: f64 },
    #[error("PSD clamp {clamp:e} at t = {t} exceeds tolerance")]
    ClampExceeded { t: f64, clamp: f64 },
    #[error("non-finite solution at t = {t}")]
    NonFinite { t: f64 },
    #[error("terminal condition has {found} leaves, expected 1 or {expected}")]
    TerminalShape { expected: usize, found: usize },
    #[error("terminal dimension {found} does not match coefficient dimension {expected}")]
    TerminalDimension { expected: usize, found: usize },
    #[error("coefficients depend on the tree node; use solve_tree")]
    NotDeterministic,
    #[error("ladder is not PSD-monotone between n = {n_prev} and n = {n} at point {point}, node {node} (min eigenvalue {min_eigenvalue:e})")]
    Monotonicity {
        n_prev: f64,
        n: f64,
        point: usize,
        node: usize,
        min_eigenvalue: f64,
    },
    #[error("ladder did not converge: residual {residual:e} at largest n = {n}")]
    NonConvergence { residual: f64, n: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("epsilon must lie in (0, T), got {0}")]
    InvalidEpsilon(f64),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PenalizationIndex {
    /// Terminal value supplied directly.
    Terminal,
    Finite {
        n: f64,
    },
    /// Limit on `[0, T − ε]`, represented by the rung with the largest `n`.
    Singular {
        epsilon: f64,
        n: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub steps: StepStats,
}

/// Backward field `Y` (and `Z` on trees) on grid points × nodes.
///
/// Rows `0..=last_point` are populated; singular solutions stop at the last
/// grid point not after `T − ε`. At a branch point the stored values belong
/// to the child layer; [`RiccatiSolution::y_left`] gives the parent's left
/// limit.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub tree: ScenarioTree,
    pub y: NodeField<SymMatrix>,
    pub z: NodeField<SymMatrix>,
    pub terminal: Vec<SymMatrix>,
    pub index: PenalizationIndex,
    pub diagnostics: SolveDiagnostics,
    pub last_point: usize,
    /// Per-point ladder residual of a singular solution.
    pub residual: Option<NodeField<f64>>,
}

impl RiccatiSolution {
    pub fn y_at(&self, point: usize, node: usize) -> &SymMatrix {
        self.y.get(point, node)
    }

    /// Value seen from `node` of the layer ending at `point`: the mean of
    /// the two children at a branch point, the stored value otherwise.
    pub fn y_left(&self, point: usize, node: usize) -> SymMatrix {
        if self.tree.is_branch_point(point) {
            let (a, b) = (self.y.get(point, node), self.y.get(point, node + 1));
            (a + b).scale(0.5)
        } else {
            self.y.get(point, node).clone()
        }
    }

    pub fn is_singular(&self) -> bool {
        matches!(self.index, PenalizationIndex::Singular { .. })
    }

    pub fn penalization(&self) -> Option<f64> {
        match self.index {
            PenalizationIndex::Finite { n } => Some(n),
            _ => None,
        }
    }

    /// `⟨x, Y_{t_point} x⟩` at the root (`point` in layer 0).
    pub fn value(&self, point: usize, x: &nalgebra::DVector<f64>) -> f64 {
        self.y.get(point, 0).quad_form(x)
    }

    pub fn residual_at(&self, point: usize, node: usize) -> f64 {
        self.residual.as_ref().map_or(0.0, |r| *r.get(point, node))
    }

    pub fn time(&self, point: usize) -> f64 {
        self.tree.grid().time(point)
    }
}
