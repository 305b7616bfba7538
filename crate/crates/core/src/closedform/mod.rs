//! Closed-form and asymptotic reference solutions: the value and control
//! under uncorrelated multiplicative increments, the reduction removing `φ`
//! and `A`, and the near-terminal expansion `Y = η/(T − t) + H/(T − t)²`.

mod expansion;
mod reduce;
mod umi;

pub use expansion::{
    asymptotic_decompose, solve_expansion, Decomposition, ExpansionSolution, ExpansionStats,
    CONTRACTION_LIMIT, MAX_HALVINGS, PICARD_TOL,
};
pub use reduce::{reduce, ReducedCoefficients, ROUND_TRIP_TOL};
pub use umi::{umi_control, umi_value, UmiSolution, DUAL_TOL};

use thiserror::Error;

use crate::coeffmodel::ModelError;
use crate::riccati::RiccatiError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClosedFormError {
    #[error("η fails the uncorrelated-increments check (deviation {deviation:e})")]
    NotUmi { deviation: f64 },
    #[error("the two closed-form value expressions differ by {gap:e}")]
    DualMismatch { gap: f64 },
    #[error("start time must precede the horizon")]
    AtHorizon,
    #[error("{0}")]
    Shape(String),
    #[error("assumption {name} fails: {detail}")]
    Assumption { name: &'static str, detail: String },
    #[error("reduction needs a node-independent Â: {0}")]
    NodeDependentDrift(String),
    #[error("reduction round trip differs by {gap:e}")]
    RoundTrip { gap: f64 },
    #[error("expansion requires φ = A = 0; reduce first")]
    NeedsReduction,
    #[error("Picard contraction factor {factor} above one half after {halvings} window halvings")]
    Contraction { factor: f64, halvings: usize },
    #[error("Picard iteration did not converge (last change {change:e})")]
    PicardNonConvergence { change: f64 },
    #[error("stitching mismatch {gap:e} at the window start")]
    Stitch { gap: f64 },
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
}
