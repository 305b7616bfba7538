use nalgebra::{DMatrix, DVector};

use super::ClosedFormError;
use crate::coeffmodel::{umi_check, MatrixProcess, NodeField, ScenarioTree};
use crate::control::{deterministic_strategy, CostBreakdown, IntervalSamples, Strategy};
use crate::matcore::SymMatrix;
use crate::quad::{exp_integral, expm};

/// Closed-form value under uncorrelated multiplicative increments.
#[derive(Debug, Clone)]
pub struct UmiSolution {
    pub tree: ScenarioTree,
    /// `h_t = ∫_t^T (E[η_s])⁻¹ ds` at every grid point.
    pub h_path: Vec<SymMatrix>,
    /// `Y_t = η_t (E[η_t])⁻¹ h_t⁻¹` at points `0..N` (the value explodes at `T`).
    pub y_field: NodeField<SymMatrix>,
    /// `G(t_j)` when `η` carries a growth factor.
    pub g_path: Option<Vec<DMatrix<f64>>>,
    /// `E[η]` per interval, with the growth of `η`.
    pub mean_eta: MatrixProcess,
    /// Largest relative gap between the two value formulas.
    pub dual_gap: f64,
}

impl UmiSolution {
    pub fn y_at(&self, point: usize, node: usize) -> &SymMatrix {
        self.y_field.get(point, node)
    }
}

pub const DUAL_TOL: f64 = 1e-10;

/// `(∫ over interval j of (C e^{g u})⁻¹ du)` for a base matrix `C`.
fn interval_inverse(
    c: &SymMatrix,
    growth: Option<&DMatrix<f64>>,
    dt: f64,
) -> Result<DMatrix<f64>, ClosedFormError> {
    let inv = c
        .inverse()
        .map_err(|_| ClosedFormError::Internal("conditional mean of η is singular".into()))?;
    Ok(match growth {
        Some(g) => exp_integral(g, dt) * inv.as_matrix(),
        None => inv.into_matrix() * dt,
    })
}

/// Evaluates both closed-form expressions for the value,
/// `η_t (E[η_t])⁻¹ h_t⁻¹` and `(∫_t^T (E[η_s | F_t])⁻¹ ds)⁻¹`, by exact
/// tree sums and exact interval integrals, and requires them to agree.
pub fn umi_value(eta: &MatrixProcess, tree: &ScenarioTree) -> Result<UmiSolution, ClosedFormError> {
    let n = tree.steps();
    if eta.len() != n {
        return Err(ClosedFormError::Shape(format!(
            "η has {} intervals, grid has {n}",
            eta.len()
        )));
    }
    let check = umi_check(eta, tree);
    if !check.pass {
        return Err(ClosedFormError::NotUmi {
            deviation: check.worst_deviation,
        });
    }
    let dt = tree.grid().dt();
    let d = eta.values().row(0)[0].dim();
    let growth = eta.growth();
    let g_at = |j: usize| growth.map(|g| &g[j]);

    let means: Vec<SymMatrix> = (0..n).map(|j| eta.mean(tree, j, 0.0)).collect();
    let mut h = vec![DMatrix::zeros(d, d); n + 1];
    for j in (0..n).rev() {
        h[j] = &h[j + 1] + interval_inverse(&means[j], g_at(j), dt)?;
    }
    let h_path: Vec<SymMatrix> = h.iter().map(SymMatrix::symmetrize).collect();

    // conditional integrals, one suffix sum per (layer, node)
    let mut cond: Vec<Vec<SymMatrix>> = vec![Vec::new(); n];
    for k in 0..tree.interval_layers() {
        let start = tree.layer_start(k);
        let stop = if tree.depth() == 0 {
            n
        } else {
            (start + tree.stride()).min(n)
        };
        for i in 0..=k {
            let mut acc = DMatrix::zeros(d, d);
            for j in (start..n).rev() {
                let m = tree.layer_of_interval(j) - k;
                let probs = tree.layer_weights(m);
                let mut c = DMatrix::zeros(d, d);
                for (s, p) in probs.iter().enumerate() {
                    c += eta.values().get(j, i + s).as_matrix() * *p;
                }
                acc += interval_inverse(&SymMatrix::symmetrize(&c), g_at(j), dt)?;
                if j < stop {
                    cond[j].push(SymMatrix::symmetrize(&acc));
                }
            }
        }
    }

    let mut gap = 0.0_f64;
    let mut rows = Vec::with_capacity(n);
    for p in 0..n {
        let h_inv = h_path[p]
            .inverse()
            .map_err(|_| ClosedFormError::Internal(format!("h singular at point {p}")))?;
        let mean_inv = means[p]
            .inverse()
            .map_err(|_| ClosedFormError::Internal("E[η] singular".into()))?;
        let mut row = Vec::with_capacity(tree.nodes_at_interval(p));
        for i in 0..tree.nodes_at_interval(p) {
            let direct =
                eta.values().get(p, i).as_matrix() * mean_inv.as_matrix() * h_inv.as_matrix();
            let conditional = cond[p][i].inverse().map_err(|_| {
                ClosedFormError::Internal(format!("conditional integral singular at {p}"))
            })?;
            let y = SymMatrix::symmetrize(&direct);
            gap = gap.max((&direct - conditional.as_matrix()).norm() / conditional.norm().max(1.0));
            row.push(y);
        }
        rows.push(row);
    }
    if gap > DUAL_TOL {
        return Err(ClosedFormError::DualMismatch { gap });
    }

    let g_path = growth.map(|g| {
        let mut path = vec![DMatrix::identity(d, d)];
        for gj in g {
            let next = path.last().unwrap() * expm(&(gj * dt));
            path.push(next);
        }
        path
    });
    let mean_values = NodeField::new(means.into_iter().map(|m| vec![m]).collect());
    let mean_eta = match growth {
        Some(g) => MatrixProcess::with_growth(mean_values, g.to_vec())?,
        None => MatrixProcess::piecewise(mean_values),
    };
    Ok(UmiSolution {
        tree: *tree,
        h_path,
        y_field: NodeField::new(rows),
        g_path,
        mean_eta,
        dual_gap: gap,
    })
}

/// Deterministic optimal strategy from grid point `t_point`:
/// `X_s = h_s h_t⁻¹ x`, `u_s = (E[η_s])⁻¹ h_t⁻¹ x`, with its exact cost
/// `⟨x, h_t⁻¹ x⟩`.
pub fn umi_control(
    sol: &UmiSolution,
    t_point: usize,
    x: &DVector<f64>,
) -> Result<Strategy, ClosedFormError> {
    let tree = sol.tree;
    let n = tree.steps();
    if t_point >= n {
        return Err(ClosedFormError::AtHorizon);
    }
    if tree.nodes_at_point(t_point) != 1 {
        return Err(ClosedFormError::Shape(format!(
            "start point {t_point} lies after the first branch point"
        )));
    }
    let d = sol.h_path[0].dim();
    if x.len() != d {
        return Err(ClosedFormError::Shape(format!(
            "state has dimension {}, expected {d}",
            x.len()
        )));
    }
    let dt = tree.grid().dt();
    let h_inv = sol.h_path[t_point]
        .inverse()
        .map_err(|_| ClosedFormError::Internal("h singular".into()))?;
    let c = h_inv.mul_vec(x);
    let states: Vec<DVector<f64>> = (t_point..=n).map(|p| sol.h_path[p].mul_vec(&c)).collect();
    let control = |j: usize, u: f64| -> Result<DVector<f64>, ClosedFormError> {
        let inv = sol
            .mean_eta
            .at(j, 0, u)
            .inverse()
            .map_err(|_| ClosedFormError::Internal("E[η] singular".into()))?;
        Ok(inv.mul_vec(&c))
    };
    let mut samples = Vec::with_capacity(n - t_point);
    for j in t_point..n {
        // h at the midpoint: h_{j+1} plus the integral over the second half
        let base = sol
            .mean_eta
            .at(j, 0, 0.0)
            .inverse()
            .map_err(|_| ClosedFormError::Internal("E[η] singular".into()))?;
        let half = match sol.mean_eta.growth() {
            Some(g) => (exp_integral(&g[j], dt) - exp_integral(&g[j], 0.5 * dt)) * base.as_matrix(),
            None => base.into_matrix() * (0.5 * dt),
        };
        let h_mid = sol.h_path[j + 1].as_matrix() + half;
        samples.push(IntervalSamples {
            x_mid: h_mid * &c,
            u: [control(j, 0.0)?, control(j, 0.5 * dt)?, control(j, dt)?],
        });
    }
    let value = sol.h_path[t_point].quad_form(&c);
    let cost = CostBreakdown {
        quadratic: value,
        cross: 0.0,
        risk: 0.0,
        terminal: 0.0,
        terminal_extrapolated: false,
    };
    Ok(deterministic_strategy(
        tree, t_point, &states, &samples, cost,
    ))
}
