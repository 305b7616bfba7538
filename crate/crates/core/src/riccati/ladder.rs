use rayon::prelude::*;
use serde::Serialize;

use super::integrator::OdeSettings;
use super::solve::{solve_ode, solve_tree};
use super::{PenalizationIndex, RiccatiError, RiccatiSolution};
use crate::coeffmodel::{CoefficientSet, CoefficientSource, NodeField};
use crate::matcore::{monotone_limit, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Ode,
    Tree,
}

/// `n = 2^0, 2^1, …, 2^max_exp`.
pub fn default_schedule(max_exp: u32) -> Vec<f64> {
    (0..=max_exp).map(|k| 2f64.powi(k as i32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderOptions {
    pub schedule: Vec<f64>,
    pub epsilon: f64,
    /// Uniform Frobenius gap between consecutive rungs on `[0, T − ε]`
    /// that counts as converged.
    pub ladder_tol: f64,
    /// Allowed negative eigenvalue of `Yⁿ⁺¹ − Yⁿ`.
    pub monotone_tol: f64,
    pub early_exit: bool,
    pub solver: SolverKind,
}

impl LadderOptions {
    pub fn new(horizon: f64) -> Self {
        LadderOptions {
            schedule: default_schedule(20),
            epsilon: 0.05 * horizon,
            ladder_tol: 1e-3,
            monotone_tol: 1e-8,
            early_exit: true,
            solver: SolverKind::Tree,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ladder {
    pub rungs: Vec<RiccatiSolution>,
    pub schedule: Vec<f64>,
    /// Sup over `[0, T − ε]` of `‖Yⁿ⁺¹ − Yⁿ‖` for each consecutive pair.
    pub increments: Vec<f64>,
    /// Smallest eigenvalue of `Yⁿ⁺¹ − Yⁿ` over all indices, per pair.
    pub min_increment_eigenvalue: Vec<f64>,
    pub converged: bool,
    pub epsilon: f64,
    pub eps_point: usize,
    pub monotone_tol: f64,
}

impl Ladder {
    pub fn last(&self) -> &RiccatiSolution {
        self.rungs.last().expect("ladder has at least one rung")
    }

    pub fn residual(&self) -> f64 {
        self.increments.last().copied().unwrap_or(f64::INFINITY)
    }
}

fn eps_point(coeffs: &CoefficientSet, epsilon: f64) -> Result<usize, RiccatiError> {
    let grid = coeffs.tree().grid();
    if !(epsilon > 0.0 && epsilon < grid.horizon()) {
        return Err(RiccatiError::InvalidEpsilon(epsilon));
    }
    Ok(grid.index_at_or_before(grid.horizon() - epsilon))
}

fn solve_rung(
    coeffs: &CoefficientSet,
    n: f64,
    solver: SolverKind,
    settings: &OdeSettings,
) -> Result<RiccatiSolution, RiccatiError> {
    if solver == SolverKind::Ode && !coeffs.is_deterministic() {
        return Err(RiccatiError::NotDeterministic);
    }
    let terminal = coeffs.penalized_terminal(n);
    let mut sol = match solver {
        SolverKind::Ode => solve_ode(coeffs, &terminal[0], settings)?,
        SolverKind::Tree => solve_tree(coeffs, &terminal, settings)?,
    };
    sol.index = PenalizationIndex::Finite { n };
    Ok(sol)
}

/// Solves the equation with terminal `n ξ + truncate(θ, n)` for each `n` of
/// the schedule, checking PSD monotonicity in `n` at every index.
///
/// Rungs are solved in parallel batches; with `early_exit` the ladder stops
/// at the first rung whose increment over `[0, T − ε]` is within
/// `ladder_tol`, independently of the batch size.
pub fn penalized_ladder(
    coeffs: &CoefficientSet,
    opts: &LadderOptions,
    settings: &OdeSettings,
) -> Result<Ladder, RiccatiError> {
    if opts.schedule.is_empty() {
        return Err(RiccatiError::InvalidSchedule("schedule is empty".into()));
    }
    if opts.schedule.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(RiccatiError::InvalidSchedule(
            "schedule not strictly increasing".into(),
        ));
    }
    if opts.schedule.iter().any(|n| !(*n > 0.0 && n.is_finite())) {
        return Err(RiccatiError::InvalidSchedule(
            "penalties must be positive".into(),
        ));
    }
    let eps_point = eps_point(coeffs, opts.epsilon)?;
    let mut ladder = Ladder {
        rungs: Vec::new(),
        schedule: Vec::new(),
        increments: Vec::new(),
        min_increment_eigenvalue: Vec::new(),
        converged: false,
        epsilon: opts.epsilon,
        eps_point,
        monotone_tol: opts.monotone_tol,
    };
    let batch = rayon::current_num_threads().max(1);
    'outer: for chunk in opts.schedule.chunks(batch) {
        let solved: Vec<Result<RiccatiSolution, RiccatiError>> = chunk
            .par_iter()
            .map(|n| solve_rung(coeffs, *n, opts.solver, settings))
            .collect();
        for (n, sol) in chunk.iter().zip(solved) {
            let sol = sol?;
            if let Some(prev) = ladder.rungs.last() {
                let (inc, min_eig) = compare(prev, &sol, eps_point);
                if min_eig.0 < -opts.monotone_tol {
                    return Err(RiccatiError::Monotonicity {
                        n_prev: *ladder.schedule.last().unwrap(),
                        n: *n,
                        point: min_eig.1,
                        node: min_eig.2,
                        min_eigenvalue: min_eig.0,
                    });
                }
                ladder.increments.push(inc);
                ladder.min_increment_eigenvalue.push(min_eig.0);
                ladder.rungs.push(sol);
                ladder.schedule.push(*n);
                if inc <= opts.ladder_tol {
                    ladder.converged = true;
                    if opts.early_exit {
                        break 'outer;
                    }
                }
            } else {
                ladder.rungs.push(sol);
                ladder.schedule.push(*n);
            }
        }
    }
    Ok(ladder)
}

/// Sup of `‖b − a‖` on points `0..=eps_point`, and the smallest eigenvalue of
/// `b − a` over all points with its location.
fn compare(
    a: &RiccatiSolution,
    b: &RiccatiSolution,
    eps_point: usize,
) -> (f64, (f64, usize, usize)) {
    let mut inc = 0.0_f64;
    let mut min_eig = (f64::INFINITY, 0, 0);
    for p in 0..=a.last_point.min(b.last_point) {
        for (i, (ya, yb)) in a.y.row(p).iter().zip(b.y.row(p)).enumerate() {
            let diff = yb - ya;
            if p <= eps_point {
                inc = inc.max(diff.norm());
            }
            let e = diff.min_eigenvalue();
            if e < min_eig.0 {
                min_eig = (e, p, i);
            }
        }
    }
    (inc, min_eig)
}

/// Monotone limit of the ladder on `[0, T − ε]`.
///
/// The returned field is the largest-`n` rung restricted to points not after
/// `T − ε`, with the per-point Cauchy increment kept as `residual`.
pub fn singular_limit(
    ladder: &Ladder,
    epsilon: f64,
    tol: f64,
) -> Result<RiccatiSolution, RiccatiError> {
    let last = ladder
        .rungs
        .last()
        .ok_or_else(|| RiccatiError::InvalidSchedule("ladder is empty".into()))?;
    let grid = last.tree.grid();
    if !(epsilon > 0.0 && epsilon < grid.horizon()) {
        return Err(RiccatiError::InvalidEpsilon(epsilon));
    }
    let eps_point = grid.index_at_or_before(grid.horizon() - epsilon);
    let n_last = ladder.schedule.last().copied().unwrap_or(f64::NAN);
    let mut rows = Vec::with_capacity(eps_point + 1);
    let mut residual_rows = Vec::with_capacity(eps_point + 1);
    let mut worst = 0.0_f64;
    for p in 0..=eps_point {
        let nodes = last.y.row(p).len();
        let mut row = Vec::with_capacity(nodes);
        let mut rrow = Vec::with_capacity(nodes);
        for i in 0..nodes {
            let seq: Vec<SymMatrix> = ladder.rungs.iter().map(|r| r.y.get(p, i).clone()).collect();
            let lim = monotone_limit(&seq, ladder.monotone_tol)?;
            worst = worst.max(lim.cauchy);
            row.push(lim.limit);
            rrow.push(lim.cauchy);
        }
        rows.push(row);
        residual_rows.push(rrow);
    }
    if ladder.rungs.len() < 2 || worst > tol {
        let residual = if ladder.rungs.len() < 2 {
            f64::INFINITY
        } else {
            worst
        };
        return Err(RiccatiError::NonConvergence {
            residual,
            n: n_last,
        });
    }
    let mut diagnostics = last.diagnostics;
    for r in &ladder.rungs[..ladder.rungs.len() - 1] {
        diagnostics.steps.merge(&r.diagnostics.steps);
    }
    Ok(RiccatiSolution {
        tree: last.tree,
        y: NodeField::new(rows),
        z: last.z.truncated(eps_point + 1),
        terminal: last.terminal.clone(),
        index: PenalizationIndex::Singular { epsilon, n: n_last },
        diagnostics,
        last_point: eps_point,
        residual: Some(NodeField::new(residual_rows)),
    })
}
