//! Coefficient processes, terminal data and the scenario-tree filtration.

mod coeffs;
mod tree;
mod umi;
mod validate;

pub use coeffs::{
    CoefficientBuilder, CoefficientSet, CoefficientSource, ItoEtaSpec, LocalCoeffs, MatrixProcess,
};
pub use tree::{binomial_weights, NodeField, ScenarioTree, TimeGrid};
pub use umi::{make_umi_eta, umi_check, MartingaleSpec, UmiCheck, UmiEta, UmiGenerator};
pub use validate::{
    validate, AssumptionCheck, AssumptionReport, CheckStatus, Location, C1_WARN_THRESHOLD,
};

use thiserror::Error;

use crate::matcore::MatError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("tree depth {depth} exceeds grid steps {steps}")]
    DepthExceedsSteps { depth: usize, steps: usize },
    #[error("tree depth {depth} does not divide grid steps {steps}")]
    DepthDoesNotDivide { depth: usize, steps: usize },
    #[error("field `{field}` has {found} rows, expected {expected}")]
    FieldLength {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("field `{field}` row {index} has {found} nodes, expected 1 or {expected}")]
    NodeCount {
        field: &'static str,
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("field `{field}` has a {found}-dimensional entry, expected {expected}")]
    Dimension {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("`{field}` is not positive definite at interval {interval}, node {node} (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite {
        field: &'static str,
        interval: usize,
        node: usize,
        min_eigenvalue: f64,
    },
    #[error(
        "`{field}` is not positive semidefinite at leaf {leaf} (min eigenvalue {min_eigenvalue:e})"
    )]
    NotPsd {
        field: &'static str,
        leaf: usize,
        min_eigenvalue: f64,
    },
    #[error("generated eta is not symmetric at interval {interval}, node {node}")]
    AsymmetricEta { interval: usize, node: usize },
    #[error("invalid generator: {0}")]
    InvalidGenerator(String),
    #[error(transparent)]
    Mat(#[from] MatError),
}
