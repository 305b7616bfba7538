use nalgebra::DMatrix;
use serde::Serialize;

use super::RiccatiSolution;
use crate::coeffmodel::{CoefficientSet, CoefficientSource};
use crate::matcore::SymMatrix;
use crate::quad::gauss_legendre5;

/// Deepest tree on which path-functional lower bounds are enumerated.
pub const PATH_DEPTH_CAP: usize = 16;

/// Relative slack granted to every bound comparison for integration error.
const REL_SLACK: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum BoundStatus {
    Pass,
    Fail { failures: usize },
    NotApplicable { reason: String },
}

impl BoundStatus {
    pub fn is_fail(&self) -> bool {
        matches!(self, BoundStatus::Fail { .. })
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, BoundStatus::Pass)
    }
}

#[derive(Debug, Clone)]
pub struct AuditEntry {
    pub point: usize,
    pub node: usize,
    pub t: f64,
    pub upper_apriori: SymMatrix,
    /// Smallest eigenvalue of `upper − Y`.
    pub upper_margin: f64,
    pub pass_upper: bool,
    pub upper_expectation: Option<f64>,
    pub pass_expectation: Option<bool>,
    pub lower: Option<SymMatrix>,
    /// Smallest eigenvalue of `Y − lower`.
    pub lower_margin: Option<f64>,
    pub pass_lower: Option<bool>,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct BoundAudit {
    pub entries: Vec<AuditEntry>,
    pub upper: BoundStatus,
    pub expectation: BoundStatus,
    pub lower: BoundStatus,
    pub delta_1: f64,
    pub k_bound: f64,
}

impl BoundAudit {
    pub fn failures(&self) -> usize {
        [&self.upper, &self.expectation, &self.lower]
            .iter()
            .map(|s| match s {
                BoundStatus::Fail { failures } => *failures,
                _ => 0,
            })
            .sum()
    }

    pub fn all_pass(&self) -> bool {
        self.failures() == 0
    }
}

/// Backward induction of `E[∫_t^T f ds + leaf | F_t]` on grid points × nodes.
fn conditional_integral<T: Clone>(
    sol: &RiccatiSolution,
    leaf: impl Fn(usize) -> T,
    interval: impl Fn(usize, usize) -> T,
    add: impl Fn(&T, &T) -> T,
    mean: impl Fn(&T, &T) -> T,
) -> Vec<Vec<T>> {
    let tree = &sol.tree;
    let n = tree.steps();
    let mut out: Vec<Vec<T>> = vec![Vec::new(); n + 1];
    out[n] = (0..tree.leaf_count()).map(&leaf).collect();
    for j in (0..n).rev() {
        let nodes = tree.nodes_at_interval(j);
        let row: Vec<T> = (0..nodes)
            .map(|i| {
                let right = if tree.is_branch_point(j + 1) || (j + 1 == n && tree.depth() > 0) {
                    mean(&out[j + 1][i], &out[j + 1][i + 1])
                } else {
                    out[j + 1][i].clone()
                };
                add(&interval(j, i), &right)
            })
            .collect();
        out[j] = row;
    }
    out
}

/// Integrand of the linear-liquidation cost, with `r = T − s`:
/// `(I + rA)ᵀ η (I + rA) + r² λ + r ((I + rA)ᵀ φ + φᵀ (I + rA))`.
pub(crate) fn linear_cost_density(c: &crate::coeffmodel::LocalCoeffs, r: f64) -> DMatrix<f64> {
    let d = c.eta.dim();
    let b = DMatrix::identity(d, d) + &c.a * r;
    let bt = b.transpose();
    let cross = &bt * &c.phi;
    &bt * c.eta.as_matrix() * &b + c.lambda.as_matrix() * (r * r) + (&cross + cross.transpose()) * r
}

/// `∫_{t_j}^{t_{j+1}} linear_cost_density ds`, exact for piecewise-constant data.
pub(crate) fn linear_cost_interval<S: CoefficientSource + ?Sized>(
    src: &S,
    j: usize,
    node: usize,
) -> DMatrix<f64> {
    let grid = src.tree().grid();
    let horizon = grid.horizon();
    let d = src.dim();
    let mut acc = DMatrix::zeros(d, d);
    for (s, w) in gauss_legendre5(grid.time(j), grid.time(j + 1)) {
        acc += linear_cost_density(&src.local(j, node, s), horizon - s) * w;
    }
    acc
}

/// Audits `sol` against the exploding a-priori upper bound, the scalar
/// bound for bounded terminal values, and the harmonic-mean lower bound.
///
/// Points after `T − ε` (singular solutions) and `t = T` are skipped. Each
/// comparison allows `psd_tol + 1e-7 max(‖Y‖, ‖bound‖)` plus twice the
/// ladder residual for singular solutions, since a finite rung approaches
/// the limit from below.
pub fn audit_bounds(sol: &RiccatiSolution, coeffs: &CoefficientSet, psd_tol: f64) -> BoundAudit {
    let tree = sol.tree;
    let grid = *tree.grid();
    let n = tree.steps();
    let horizon = grid.horizon();
    let d = coeffs.dim();
    let last = sol.last_point.min(n - 1);
    let singular = sol.is_singular();

    let upper_int = conditional_integral(
        sol,
        |_| DMatrix::<f64>::zeros(d, d),
        |j, i| linear_cost_interval(coeffs, j, i),
        |a, b| a + b,
        |a, b| (a + b) * 0.5,
    );

    let expectation = (!singular).then(|| {
        let k = coeffs.k_bound();
        let factor = (4.0 * k * horizon).exp();
        let e = conditional_integral(
            sol,
            |l| sol.terminal[if sol.terminal.len() == 1 { 0 } else { l }].norm(),
            |j, i| coeffs.local(j, i, grid.time(j)).lambda.norm() * grid.dt(),
            |a, b| a + b,
            |a, b| 0.5 * (a + b),
        );
        (factor, e)
    });

    let delta_1 = delta_one(coeffs, &tree);
    let lower = lower_bounds(sol, coeffs, delta_1, psd_tol);

    let mut entries = Vec::new();
    let (mut up_fail, mut exp_fail, mut low_fail) = (0, 0, 0);
    for p in 0..=last {
        let rem = grid.remaining(p);
        for i in 0..sol.y.row(p).len() {
            let y = sol.y.get(p, i);
            let upper = SymMatrix::symmetrize(&(&upper_int[p][i] / (rem * rem)));
            let slack = 2.0 * sol.residual_at(p, i);
            let tol_for = |b: f64| psd_tol + REL_SLACK * y.norm().max(b) + slack;
            let tolerance = tol_for(upper.norm());
            let upper_margin = (&upper - y).min_eigenvalue();
            let pass_upper = upper_margin >= -tolerance;
            up_fail += usize::from(!pass_upper);

            let (upper_expectation, pass_expectation) = match &expectation {
                Some((factor, e)) => {
                    let b = factor * e[p][i];
                    let ok = y.norm() <= b + tol_for(b);
                    exp_fail += usize::from(!ok);
                    (Some(b), Some(ok))
                }
                None => (None, None),
            };

            let (lower_m, lower_margin, pass_lower) = match &lower {
                Ok(rows) => {
                    let l = rows[p][i].clone();
                    let margin = (y - &l).min_eigenvalue();
                    let ok = margin >= -tol_for(l.norm());
                    low_fail += usize::from(!ok);
                    (Some(l), Some(margin), Some(ok))
                }
                Err(_) => (None, None, None),
            };

            entries.push(AuditEntry {
                point: p,
                node: i,
                t: grid.time(p),
                upper_apriori: upper,
                upper_margin,
                pass_upper,
                upper_expectation,
                pass_expectation,
                lower: lower_m,
                lower_margin,
                pass_lower,
                tolerance,
            });
        }
    }

    let status = |fails: usize| {
        if fails == 0 {
            BoundStatus::Pass
        } else {
            BoundStatus::Fail { failures: fails }
        }
    };
    BoundAudit {
        entries,
        upper: status(up_fail),
        expectation: if expectation.is_some() {
            status(exp_fail)
        } else {
            BoundStatus::NotApplicable {
                reason: "terminal value is singular".into(),
            }
        },
        lower: match lower {
            Ok(_) => status(low_fail),
            Err(reason) => BoundStatus::NotApplicable { reason },
        },
        delta_1,
        k_bound: coeffs.k_bound(),
    }
}

/// `max ‖η⁻¹ φ + A‖` over all intervals and nodes.
fn delta_one(coeffs: &CoefficientSet, tree: &crate::coeffmodel::ScenarioTree) -> f64 {
    let grid = tree.grid();
    let mut best = 0.0_f64;
    for j in 0..tree.steps() {
        for i in 0..tree.nodes_at_interval(j) {
            let ts: &[f64] = if coeffs.varies_within(j) {
                &[grid.time(j), grid.time(j + 1)]
            } else {
                &[grid.time(j)]
            };
            for t in ts {
                let c = coeffs.local(j, i, *t);
                best = best.max((c.eta_inv.as_matrix() * &c.phi + &c.a).norm());
            }
        }
    }
    best
}

/// Paths from a node to the leaves: probability, `∫ η⁻¹` along the path, leaf.
#[derive(Clone, Default)]
struct PathSet {
    prob: Vec<f64>,
    integral: Vec<DMatrix<f64>>,
    leaf: Vec<usize>,
}

/// `e^{−4 δ₁ T} E[(ξ̄⁻¹ + ∫_t^T η⁻¹ ds)⁻¹ | F_t]`, or with `ξ̄⁻¹` dropped for
/// singular solutions. The expectation is a path functional, so paths are
/// enumerated; trees deeper than [`PATH_DEPTH_CAP`] are not audited.
fn lower_bounds(
    sol: &RiccatiSolution,
    coeffs: &CoefficientSet,
    delta_1: f64,
    psd_tol: f64,
) -> Result<Vec<Vec<SymMatrix>>, String> {
    let tree = sol.tree;
    let n = tree.steps();
    let d = coeffs.dim();
    if tree.depth() > PATH_DEPTH_CAP {
        return Err(format!(
            "tree depth {} exceeds the path enumeration cap {PATH_DEPTH_CAP}",
            tree.depth()
        ));
    }
    let leaves = tree.leaf_count();
    let base: Vec<DMatrix<f64>> = if sol.is_singular() {
        for l in 0..leaves {
            if coeffs.xi(l).min_eigenvalue() <= psd_tol {
                return Err("xi is not invertible".into());
            }
        }
        vec![DMatrix::zeros(d, d); leaves]
    } else {
        let mut v = Vec::with_capacity(leaves);
        for l in 0..leaves {
            let xi_bar = &sol.terminal[if sol.terminal.len() == 1 { 0 } else { l }];
            if xi_bar.min_eigenvalue() <= psd_tol {
                return Err("terminal value is not invertible".into());
            }
            v.push(xi_bar.inverse().map_err(|e| e.to_string())?.into_matrix());
        }
        v
    };
    let factor = (-4.0 * delta_1 * tree.grid().horizon()).exp();
    let grid = tree.grid();

    let mut rows: Vec<Vec<SymMatrix>> = vec![Vec::new(); n + 1];
    let mut next: Vec<PathSet> = (0..leaves)
        .map(|l| PathSet {
            prob: vec![1.0],
            integral: vec![DMatrix::zeros(d, d)],
            leaf: vec![l],
        })
        .collect();
    let layers = tree.interval_layers();
    for k in (0..layers).rev() {
        let start = tree.layer_start(k);
        let end = if k + 1 == layers {
            n
        } else {
            tree.layer_start(k + 1)
        };
        let mut current = Vec::with_capacity(k + 1);
        let mut layer_rows: Vec<Vec<SymMatrix>> = vec![Vec::new(); end - start];
        for i in 0..=k {
            let children = if tree.depth() == 0 {
                next[0].clone()
            } else {
                let mut m = PathSet::default();
                for c in [i, i + 1] {
                    m.prob.extend(next[c].prob.iter().map(|p| 0.5 * p));
                    m.integral.extend(next[c].integral.iter().cloned());
                    m.leaf.extend(next[c].leaf.iter().cloned());
                }
                m
            };
            let mut suffix = DMatrix::zeros(d, d);
            for p in (start..end).rev() {
                suffix += coeffs
                    .eta_inv_integral(p, i, grid.time(p), grid.time(p + 1))
                    .as_matrix();
                let mut acc = DMatrix::zeros(d, d);
                for ((prob, integral), leaf) in children
                    .prob
                    .iter()
                    .zip(&children.integral)
                    .zip(&children.leaf)
                {
                    let total = SymMatrix::symmetrize(&(&base[*leaf] + &suffix + integral));
                    let inv = total.inverse().map_err(|e| e.to_string())?;
                    acc += inv.as_matrix() * *prob;
                }
                layer_rows[p - start].push(SymMatrix::symmetrize(&(acc * factor)));
            }
            let mut here = children;
            for m in here.integral.iter_mut() {
                *m += &suffix;
            }
            current.push(here);
        }
        for (offset, r) in layer_rows.into_iter().enumerate() {
            rows[start + offset] = r;
        }
        next = current;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffmodel::LocalCoeffs;

    #[test]
    fn linear_density_scalar() {
        let c = LocalCoeffs {
            eta: SymMatrix::scalar(1, 1.0),
            eta_inv: SymMatrix::scalar(1, 1.0),
            lambda: SymMatrix::scalar(1, 1.0),
            phi: DMatrix::zeros(1, 1),
            a: DMatrix::zeros(1, 1),
        };
        assert_eq!(linear_cost_density(&c, 0.5)[(0, 0)], 1.25);
        let c = LocalCoeffs {
            a: DMatrix::from_element(1, 1, 2.0),
            phi: DMatrix::from_element(1, 1, 0.5),
            ..c
        };
        // (1 + 2r)² + r² + 2r·0.5(1 + 2r) at r = 0.5
        assert!((linear_cost_density(&c, 0.5)[(0, 0)] - (4.0 + 0.25 + 1.0)).abs() < 1e-14);
    }
}
