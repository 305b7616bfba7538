use nalgebra::DMatrix;
use serde::Serialize;

use super::ClosedFormError;
use crate::coeffmodel::{
    CoefficientSet, CoefficientSource, ItoEtaSpec, MatrixProcess, NodeField, ScenarioTree,
};
use crate::matcore::SymMatrix;
use crate::riccati::{solve_tree_from, OdeSettings, RiccatiSolution};

pub const PICARD_TOL: f64 = 1e-12;
pub const CONTRACTION_LIMIT: f64 = 0.501;
pub const MAX_HALVINGS: usize = 10;
const MAX_PICARD: usize = 500;
const STITCH_TOL: f64 = 1e-8;

/// Remainder `H` of `Y = η/(T − t) + H/(T − t)²`.
#[derive(Debug, Clone)]
pub struct ExpansionSolution {
    pub tree: ScenarioTree,
    pub h_field: NodeField<SymMatrix>,
    pub z_h_field: NodeField<SymMatrix>,
    /// `sup ‖H_t‖ / (T − t)²` over `t < T`.
    pub c_bound: f64,
    /// Length of the fixed-point window actually used.
    pub tau: f64,
    pub window_start: usize,
    /// `K^γ = sup ‖(T − s) λ_s + b^η_s‖`, also the ball radius `R`.
    pub gamma_bound: f64,
    pub contraction_factor: f64,
    pub picard_iterations: usize,
    pub halvings: usize,
    pub stitch_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpansionStats {
    pub c_bound: f64,
    pub tau: f64,
    pub window_start: usize,
    pub gamma_bound: f64,
    pub contraction_factor: f64,
    pub picard_iterations: usize,
    pub halvings: usize,
}

impl ExpansionSolution {
    pub fn stats(&self) -> ExpansionStats {
        ExpansionStats {
            c_bound: self.c_bound,
            tau: self.tau,
            window_start: self.window_start,
            gamma_bound: self.gamma_bound,
            contraction_factor: self.contraction_factor,
            picard_iterations: self.picard_iterations,
            halvings: self.halvings,
        }
    }
}

struct Picard<'a> {
    coeffs: &'a CoefficientSet,
    ito: &'a ItoEtaSpec,
    tree: ScenarioTree,
    start: usize,
}

impl Picard<'_> {
    fn gamma(&self, j: usize, i: usize, u: f64) -> DMatrix<f64> {
        let grid = self.tree.grid();
        let r = grid.horizon() - (grid.time(j) + u);
        self.coeffs.lambda().get(j, i).as_matrix() * r + self.ito.b_eta.at(j, i, u).as_matrix()
    }

    /// `(T − s) γ_s − (T − s)⁻² H η_s⁻¹ H` on interval `j`, node `i`.
    fn integrand(&self, j: usize, i: usize, u: f64, h: &DMatrix<f64>) -> DMatrix<f64> {
        let grid = self.tree.grid();
        let s = grid.time(j) + u;
        let r = (grid.horizon() - s).max(0.0);
        let g = self.gamma(j, i, u) * r;
        if r == 0.0 {
            return g;
        }
        let eta_inv = self.coeffs.local(j, i, s).eta_inv;
        g - h * eta_inv.as_matrix() * h / (r * r)
    }

    /// One application of `Γ` on the window, by backward induction with
    /// Simpson's rule and Hermite midpoints.
    fn apply(&self, h: &[Vec<DMatrix<f64>>]) -> Vec<Vec<DMatrix<f64>>> {
        let n = self.tree.steps();
        let dt = self.tree.grid().dt();
        let d = self.coeffs.dim();
        let mut out: Vec<Vec<DMatrix<f64>>> = h
            .iter()
            .map(|r| r.iter().map(|_| DMatrix::zeros(d, d)).collect())
            .collect();
        let off = self.start;
        for j in (self.start..n).rev() {
            let nodes = self.tree.nodes_at_interval(j);
            let branching = h[j + 1 - off].len() == nodes + 1;
            for i in 0..nodes {
                let kids: &[usize] = if branching { &[i, i + 1] } else { &[i] };
                let w = 1.0 / kids.len() as f64;
                let mut hb = DMatrix::zeros(d, d);
                let mut fb = DMatrix::zeros(d, d);
                let mut next = DMatrix::zeros(d, d);
                for &c in kids {
                    let hc = &h[j + 1 - off][c];
                    hb += hc * w;
                    fb += self.integrand(j, i, dt, hc) * w;
                    next += &out[j + 1 - off][c] * w;
                }
                let ha = &h[j - off][i];
                let fa = self.integrand(j, i, 0.0, ha);
                let hm = (ha + &hb) * 0.5 + (&fb - &fa) * (dt / 8.0);
                let fm = self.integrand(j, i, 0.5 * dt, &hm);
                let integral = (fa + fm * 4.0 + fb) * (dt / 6.0);
                let v = next + integral;
                out[j - off][i] = (&v + v.transpose()) * 0.5;
            }
        }
        out
    }
}

fn sup_diff(a: &[Vec<DMatrix<f64>>], b: &[Vec<DMatrix<f64>>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).norm()))
        .fold(0.0, f64::max)
}

fn sup_norm(a: &[Vec<DMatrix<f64>>]) -> f64 {
    a.iter()
        .flat_map(|r| r.iter().map(|m| m.norm()))
        .fold(0.0, f64::max)
}

fn gamma_bound(coeffs: &CoefficientSet, ito: &ItoEtaSpec) -> f64 {
    let tree = coeffs.tree();
    let grid = tree.grid();
    let dt = grid.dt();
    let mut k = 0.0_f64;
    for j in 0..grid.steps() {
        for i in 0..tree.nodes_at_interval(j) {
            for u in [0.0, dt] {
                let r = grid.horizon() - grid.time(j) - u;
                let g =
                    coeffs.lambda().get(j, i).as_matrix() * r + ito.b_eta.at(j, i, u).as_matrix();
                k = k.max(g.norm());
            }
        }
    }
    k
}

/// Solves for `H` on `[T − τ, T]` as the fixed point of
/// `Γ(H)_t = E[∫_t^T ((T − s) γ_s − (T − s)⁻² H_s η_s⁻¹ H_s) ds | F_t]`,
/// `γ = (T − s) λ + b^η`, and extends it to `[0, T − τ]` through the
/// Riccati equation started from `η/τ + H/τ²`.
///
/// The window is the largest `τ` with `τ · 4 K^γ √d / (3δ) ≤ 1/2`, capped at
/// `δ/(2R)` and snapped to the grid; it is halved while the observed
/// contraction factor exceeds one half.
pub fn solve_expansion(
    coeffs: &CoefficientSet,
    ito: &ItoEtaSpec,
    settings: &OdeSettings,
) -> Result<ExpansionSolution, ClosedFormError> {
    if coeffs.has_phi() || coeffs.has_a() {
        return Err(ClosedFormError::NeedsReduction);
    }
    let tree = *coeffs.tree();
    let grid = *tree.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let horizon = grid.horizon();
    let d = coeffs.dim();
    let delta = coeffs.delta();
    if !(delta > 0.0) {
        return Err(ClosedFormError::Assumption {
            name: "A0",
            detail: format!("δ = {delta} must be positive"),
        });
    }
    let k_gamma = gamma_bound(coeffs, ito);
    let mut tau = if k_gamma == 0.0 {
        horizon
    } else {
        horizon.min(3.0 * delta / (8.0 * k_gamma * (d as f64).sqrt()))
    };

    let mut halvings = 0;
    let (h_window, start, factor, iterations) = loop {
        let tau_eff = if k_gamma > 0.0 {
            tau.min(delta / (2.0 * k_gamma))
        } else {
            tau
        };
        let start = if tau_eff >= horizon * (1.0 - 1e-12) {
            0
        } else {
            (n - ((tau_eff / dt) * (1.0 + 1e-12)).floor() as usize).min(n - 1)
        };
        let picard = Picard {
            coeffs,
            ito,
            tree,
            start,
        };
        let mut h: Vec<Vec<DMatrix<f64>>> = (start..=n)
            .map(|p| vec![DMatrix::zeros(d, d); tree.nodes_at_point(p)])
            .collect();
        let mut prev = f64::NAN;
        let mut factor = 0.0_f64;
        let mut iterations = 0;
        loop {
            let next = picard.apply(&h);
            let change = sup_diff(&next, &h);
            let scale = sup_norm(&next).max(1.0);
            if prev.is_finite() && prev > 1e-9 * scale {
                factor = factor.max(change / prev);
            }
            h = next;
            iterations += 1;
            prev = change;
            if change <= PICARD_TOL * scale {
                break;
            }
            if iterations >= MAX_PICARD || !change.is_finite() {
                return Err(ClosedFormError::PicardNonConvergence { change });
            }
        }
        if factor <= CONTRACTION_LIMIT {
            break (h, start, factor, iterations);
        }
        halvings += 1;
        if halvings > MAX_HALVINGS {
            return Err(ClosedFormError::Contraction {
                factor,
                halvings: MAX_HALVINGS,
            });
        }
        tau *= 0.5;
    };

    let mut rows: Vec<Vec<SymMatrix>> = vec![Vec::new(); n + 1];
    for (p, row) in h_window.iter().enumerate() {
        rows[start + p] = row.iter().map(SymMatrix::symmetrize).collect();
    }
    let eta_at = |p: usize, i: usize| coeffs.local(p, i, grid.time(p)).eta;
    let mut stitch_gap = 0.0;
    if start > 0 {
        let r0 = grid.remaining(start);
        let terminal: Vec<SymMatrix> = rows[start]
            .iter()
            .enumerate()
            .map(|(i, h)| {
                SymMatrix::symmetrize(
                    &(eta_at(start, i).as_matrix() / r0 + h.as_matrix() / (r0 * r0)),
                )
            })
            .collect();
        for (i, y) in terminal.iter().enumerate() {
            let back = y.as_matrix() * (r0 * r0) - eta_at(start, i).as_matrix() * r0;
            stitch_gap = f64::max(stitch_gap, (back - rows[start][i].as_matrix()).norm());
        }
        if stitch_gap > STITCH_TOL {
            return Err(ClosedFormError::Stitch { gap: stitch_gap });
        }
        let y = solve_tree_from(coeffs, start, &terminal, settings)?;
        for (p, row) in rows.iter_mut().enumerate().take(start) {
            let r = grid.remaining(p);
            *row =
                y.y.row(p)
                    .iter()
                    .enumerate()
                    .map(|(i, yv)| {
                        SymMatrix::symmetrize(
                            &(yv.as_matrix() * (r * r) - eta_at(p, i).as_matrix() * r),
                        )
                    })
                    .collect();
        }
    }

    let c_bound = rows[..n]
        .iter()
        .enumerate()
        .flat_map(|(p, row)| {
            let r = grid.remaining(p);
            row.iter().map(move |h| h.norm() / (r * r))
        })
        .fold(0.0, f64::max);
    let h_field = NodeField::new(rows);
    let z_h_field = tree_differences(&tree, &h_field);
    Ok(ExpansionSolution {
        tree,
        h_field,
        z_h_field,
        c_bound,
        tau: grid.remaining(start),
        window_start: start,
        gamma_bound: k_gamma,
        contraction_factor: factor,
        picard_iterations: iterations,
        halvings,
        stitch_gap,
    })
}

fn tree_differences(tree: &ScenarioTree, field: &NodeField<SymMatrix>) -> NodeField<SymMatrix> {
    let d = field.get(0, 0).dim();
    let scale = if tree.depth() == 0 {
        0.0
    } else {
        0.5 / tree.increment()
    };
    field.map(|p, i, _| {
        let k = tree.layer_of_point(p);
        if tree.depth() == 0 || k >= tree.depth() {
            return SymMatrix::zeros(d);
        }
        let b = tree.layer_start(k + 1);
        (field.get(b, i + 1) - field.get(b, i)).scale(scale)
    })
}

/// `H_t = (T − t)² Y_t − (T − t) η_t` read off a solved field.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub h_field: NodeField<SymMatrix>,
    /// `sup ‖H_t‖ / (T − t)²`.
    pub c_estimate: f64,
    /// `sup ‖H − H_expansion‖` over the solved points, when supplied.
    pub discrepancy: Option<f64>,
}

pub fn asymptotic_decompose(
    sol: &RiccatiSolution,
    eta: &MatrixProcess,
    expansion: Option<&ExpansionSolution>,
) -> Decomposition {
    let grid = sol.tree.grid();
    let last = sol.last_point.min(grid.steps() - 1);
    let rows: Vec<Vec<SymMatrix>> = (0..=last)
        .map(|p| {
            let r = grid.remaining(p);
            sol.y
                .row(p)
                .iter()
                .enumerate()
                .map(|(i, y)| {
                    SymMatrix::symmetrize(
                        &(y.as_matrix() * (r * r) - eta.values().get(p, i).as_matrix() * r),
                    )
                })
                .collect()
        })
        .collect();
    let h_field = NodeField::new(rows);
    let c_estimate = h_field
        .iter()
        .map(|(p, _, h)| {
            let r = grid.remaining(p);
            h.norm() / (r * r)
        })
        .fold(0.0, f64::max);
    let discrepancy = expansion.map(|e| {
        h_field
            .iter()
            .map(|(p, i, h)| (h - e.h_field.get(p, i)).norm())
            .fold(0.0, f64::max)
    });
    Decomposition {
        h_field,
        c_estimate,
        discrepancy,
    }
}
