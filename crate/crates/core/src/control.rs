//! Feedback strategies, closed-loop state moments and expected costs.
//!
//! On a recombining tree the state is path dependent, so the closed loop is
//! carried as per-node moments `E[X; node]` and `E[X Xᵀ; node]`. Both evolve
//! linearly under the node's feedback and split evenly at branch points, which
//! gives the exact expectation of the per-path RK4 scheme without enumerating
//! paths.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::coeffmodel::{CoefficientSet, CoefficientSource, LocalCoeffs, NodeField, ScenarioTree};
use crate::matcore::SymMatrix;
use crate::quad::gauss_legendre5;
use crate::riccati::{Integrator, OdeSettings, RiccatiError, RiccatiSolution, StepStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("grid or tree of the Riccati field does not match the coefficients")]
    GridMismatch,
    #[error("start point {t0} must precede the last solved point {end}")]
    StartAfterEnd { t0: usize, end: usize },
    #[error("start point {0} lies after the first branch point")]
    StartNotAtRoot(usize),
    #[error("initial state has dimension {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("initial state is not finite")]
    NonFiniteState,
    #[error("terminal matrices: expected 1 or {expected}, found {found}")]
    TerminalShape { expected: usize, found: usize },
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
}

/// Cost split by term of `(X, u)ᵀ [[λ, φᵀ], [φ, η]] (X, u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    /// `∫ uᵀ η u`
    pub quadratic: f64,
    /// `∫ 2 uᵀ φ X`
    pub cross: f64,
    /// `∫ Xᵀ λ X`
    pub risk: f64,
    pub terminal: f64,
    /// The terminal term is the value `⟨X, Y X⟩` at the last solved point
    /// before `T` rather than a cost at `T`.
    pub terminal_extrapolated: bool,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.quadratic + self.cross + self.risk + self.terminal
    }
}

/// Probability-weighted joint moments `E[(X, u)(X, u)ᵀ; node]` at the start,
/// the midpoint and just before the end of an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalMoments {
    pub start: DMatrix<f64>,
    pub mid: DMatrix<f64>,
    pub end: DMatrix<f64>,
}

/// A strategy with its state, control and cost.
///
/// `x_path` and `u_path` hold conditional means per node; rows before
/// `t0_point` are a single zero vector. `moments` is indexed by interval.
#[derive(Debug, Clone)]
pub struct Strategy {
    pub tree: ScenarioTree,
    pub t0_point: usize,
    pub end_point: usize,
    pub x0: DVector<f64>,
    pub x_path: NodeField<DVector<f64>>,
    pub u_path: NodeField<DVector<f64>>,
    pub moments: NodeField<IntervalMoments>,
    /// `E[X Xᵀ; node]` at `end_point`.
    pub terminal_moment: Vec<DMatrix<f64>>,
    pub cost: CostBreakdown,
    pub realized_cost: f64,
    pub singular: bool,
}

impl Strategy {
    pub fn t0(&self) -> f64 {
        self.tree.grid().time(self.t0_point)
    }

    fn dim(&self) -> usize {
        self.x0.len()
    }

    /// `E[X Xᵀ; node]` at grid point `p` in `[t0, end]`.
    pub fn state_moment(&self, p: usize, node: usize) -> DMatrix<f64> {
        let d = self.dim();
        if p == self.end_point {
            return self.terminal_moment[node].clone();
        }
        self.moments
            .get(p, node)
            .start
            .view((0, 0), (d, d))
            .into_owned()
    }

    /// Root-mean-square `‖X‖` at grid point `p`.
    pub fn rms_norm(&self, p: usize) -> f64 {
        (0..self.tree.nodes_at_point(p))
            .map(|i| self.state_moment(p, i).trace())
            .sum::<f64>()
            .max(0.0)
            .sqrt()
    }
}

fn joint(s: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    let d = s.nrows();
    let mut w = DMatrix::zeros(2 * d, 2 * d);
    let sk = s * k.transpose();
    w.view_mut((0, 0), (d, d)).copy_from(s);
    w.view_mut((0, d), (d, d)).copy_from(&sk);
    w.view_mut((d, 0), (d, d)).copy_from(&sk.transpose());
    w.view_mut((d, d), (d, d))
        .copy_from(&(k * s * k.transpose()));
    w
}

fn outer_joint(x: &DVector<f64>, u: &DVector<f64>, weight: f64) -> DMatrix<f64> {
    let z = DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).cloned());
    &z * z.transpose() * weight
}

fn check_start(
    tree: &ScenarioTree,
    t0: usize,
    end: usize,
    dim: usize,
    x0: &DVector<f64>,
) -> Result<(), ControlError> {
    if t0 >= end {
        return Err(ControlError::StartAfterEnd { t0, end });
    }
    if tree.nodes_at_point(t0) != 1 {
        return Err(ControlError::StartNotAtRoot(t0));
    }
    if x0.len() != dim {
        return Err(ControlError::Dimension {
            expected: dim,
            found: x0.len(),
        });
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(ControlError::NonFiniteState);
    }
    Ok(())
}

/// Splits node quantities at a branch point: child `c` receives half of
/// parents `c` (down) and `c − 1` (up).
fn split<T: Clone>(parents: &[T], zero: &T, add_half: impl Fn(&T, &T) -> T) -> Vec<T> {
    let k = parents.len();
    (0..=k)
        .map(|c| {
            let mut acc = zero.clone();
            if c < k {
                acc = add_half(&acc, &parents[c]);
            }
            if c >= 1 {
                acc = add_half(&acc, &parents[c - 1]);
            }
            acc
        })
        .collect()
}

fn gain(c: &LocalCoeffs, y: &DMatrix<f64>) -> DMatrix<f64> {
    c.eta_inv.as_matrix() * (y - &c.phi)
}

/// RK4 propagator of `dX = M X ds` over one step of length `h`.
fn rk4_propagator(ma: &DMatrix<f64>, mm: &DMatrix<f64>, mb: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let id = DMatrix::<f64>::identity(ma.nrows(), ma.nrows());
    let s2 = mm * (&id + ma * (0.5 * h));
    let s3 = mm * (&id + &s2 * (0.5 * h));
    let s4 = mb * (&id + &s3 * h);
    &id + (ma + &s2 * 2.0 + &s3 * 2.0 + s4) * (h / 6.0)
}

/// Largest `h ‖A − K‖` of a closed-loop RK4 substep.
const MAX_GAIN_STEP: f64 = 0.2;

/// Closed-loop strategy `u = η⁻¹ (Y − φ) X` started from `x0` at grid point
/// `t0_point`. Each interval is split into an even number of RK4 substeps,
/// enough to keep `h ‖A − K‖ ≤ 0.2`; `Y` inside the interval is integrated
/// back from its right end with the Riccati integrator.
///
/// Runs to `T` for penalized fields and to the last solved point for
/// singular ones, where the terminal term is the remaining value
/// `E⟨X, Y X⟩`.
pub fn synthesize(
    y: &RiccatiSolution,
    coeffs: &CoefficientSet,
    t0_point: usize,
    x0: &DVector<f64>,
) -> Result<Strategy, ControlError> {
    let tree = y.tree;
    let cgrid = coeffs.tree().grid();
    if tree.grid() != cgrid || (tree != *coeffs.tree() && !coeffs.node_independent()) {
        return Err(ControlError::GridMismatch);
    }
    let d = coeffs.dim();
    let end = y.last_point;
    check_start(&tree, t0_point, end, d, x0)?;
    let grid = *tree.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let zero_vec = DVector::zeros(d);
    let settings = OdeSettings::default();
    let integrator = Integrator::new(coeffs, &settings);
    let mut stats = StepStats::default();

    let mut x_rows: Vec<Vec<DVector<f64>>> = vec![vec![zero_vec.clone()]; end + 1];
    let mut u_rows: Vec<Vec<DVector<f64>>> = vec![vec![zero_vec.clone()]; end + 1];
    let blank = IntervalMoments {
        start: DMatrix::zeros(2 * d, 2 * d),
        mid: DMatrix::zeros(2 * d, 2 * d),
        end: DMatrix::zeros(2 * d, 2 * d),
    };
    let mut m_rows: Vec<Vec<IntervalMoments>> = vec![vec![blank]; n];

    let mut w = vec![1.0];
    let mut mean = vec![x0.clone()];
    let mut second = vec![x0 * x0.transpose()];
    let mut u_mean_end: Vec<DVector<f64>> = Vec::new();

    for j in t0_point..end {
        let t = grid.time(j);
        let nodes = tree.nodes_at_interval(j);
        debug_assert_eq!(nodes, mean.len());
        let mut x_row = Vec::with_capacity(nodes);
        let mut u_row = Vec::with_capacity(nodes);
        let mut mom_row = Vec::with_capacity(nodes);
        let mut next_mean = Vec::with_capacity(nodes);
        let mut next_second = Vec::with_capacity(nodes);
        u_mean_end.clear();
        for i in 0..nodes {
            let y0 = y.y_at(j, i).as_matrix();
            let y1 = y.y_left(j + 1, i).into_matrix();
            let c0 = coeffs.local(j, i, t);
            let c1 = coeffs.local(j, i, t + dt);
            let stiffness = dt
                * (&c0.a - gain(&c0, y0))
                    .norm()
                    .max((&c1.a - gain(&c1, &y1)).norm());
            let substeps = 2 * ((stiffness / MAX_GAIN_STEP).ceil() as usize).max(1);
            let hs = dt / substeps as f64;
            // Y at spacing hs/2, integrated back from the interval end
            let mut ys = vec![y1.clone(); 2 * substeps + 1];
            let mut h = 0.5 * hs;
            for q in (1..2 * substeps).rev() {
                let (lo, hi) = (t + q as f64 * 0.5 * hs, t + (q + 1) as f64 * 0.5 * hs);
                ys[q] = integrator.span(j, i, lo, hi, ys[q + 1].clone(), &mut h, &mut stats)?;
            }
            ys[0] = y0.clone();
            let mut k = Vec::with_capacity(ys.len());
            let mut m = Vec::with_capacity(ys.len());
            for (q, yq) in ys.iter().enumerate() {
                let c = match q {
                    0 => c0.clone(),
                    _ if q == 2 * substeps => c1.clone(),
                    _ => coeffs.local(j, i, t + q as f64 * 0.5 * hs),
                };
                let kq = gain(&c, yq);
                m.push(&c.a - &kq);
                k.push(kq);
            }
            let mut first = DMatrix::identity(d, d);
            let mut r = DMatrix::identity(d, d);
            for step in 0..substeps {
                r = rk4_propagator(&m[2 * step], &m[2 * step + 1], &m[2 * step + 2], hs) * r;
                if step + 1 == substeps / 2 {
                    first = r.clone();
                }
            }
            let s_mid = &first * &second[i] * first.transpose();
            let x_end = &r * &mean[i];
            let s_end = &r * &second[i] * r.transpose();
            x_row.push(&mean[i] / w[i]);
            u_row.push(&k[0] * &mean[i] / w[i]);
            mom_row.push(IntervalMoments {
                start: joint(&second[i], &k[0]),
                mid: joint(&s_mid, &k[substeps]),
                end: joint(&s_end, &k[2 * substeps]),
            });
            u_mean_end.push(&k[2 * substeps] * &x_end);
            next_mean.push(x_end);
            next_second.push(s_end);
        }
        x_rows[j] = x_row;
        u_rows[j] = u_row;
        m_rows[j] = mom_row;
        if tree.is_branch_point(j + 1) {
            let zd = DMatrix::zeros(d, d);
            mean = split(&next_mean, &zero_vec, |a, b| a + b * 0.5);
            second = split(&next_second, &zd, |a, b| a + b * 0.5);
            u_mean_end = split(&u_mean_end, &zero_vec, |a, b| a + b * 0.5);
            w = split(&w, &0.0, |a, b| a + b * 0.5);
        } else {
            mean = next_mean;
            second = next_second;
        }
    }
    x_rows[end] = mean.iter().zip(&w).map(|(m, wi)| m / *wi).collect();
    u_rows[end] = u_mean_end.iter().zip(&w).map(|(m, wi)| m / *wi).collect();

    let singular = end < n;
    let mut strategy = Strategy {
        tree,
        t0_point,
        end_point: end,
        x0: x0.clone(),
        x_path: NodeField::new(x_rows),
        u_path: NodeField::new(u_rows),
        moments: NodeField::new(m_rows),
        terminal_moment: second,
        cost: CostBreakdown {
            quadratic: 0.0,
            cross: 0.0,
            risk: 0.0,
            terminal: 0.0,
            terminal_extrapolated: singular,
        },
        realized_cost: 0.0,
        singular,
    };
    let cost = evaluate_cost(&strategy, coeffs, y.y.row(end))?;
    strategy.cost = cost;
    strategy.realized_cost = cost.total();
    Ok(strategy)
}

/// Expected cost of `strategy`: exact tree weights, Simpson's rule per
/// interval, plus `Σ E⟨X, terminal X⟩` at the strategy's end point.
/// `terminal` holds one matrix per node there, or one shared matrix.
pub fn evaluate_cost(
    strategy: &Strategy,
    coeffs: &CoefficientSet,
    terminal: &[SymMatrix],
) -> Result<CostBreakdown, ControlError> {
    let tree = &strategy.tree;
    if tree.grid() != coeffs.tree().grid() {
        return Err(ControlError::GridMismatch);
    }
    let width = tree.nodes_at_point(strategy.end_point);
    if terminal.len() != 1 && terminal.len() != width {
        return Err(ControlError::TerminalShape {
            expected: width,
            found: terminal.len(),
        });
    }
    let d = strategy.dim();
    let grid = tree.grid();
    let dt = grid.dt();
    let (mut quadratic, mut cross, mut risk) = (0.0, 0.0, 0.0);
    let mut parts = |c: &LocalCoeffs, w: &DMatrix<f64>, weight: f64| {
        let xx = w.view((0, 0), (d, d));
        let xu = w.view((0, d), (d, d));
        let uu = w.view((d, d), (d, d));
        risk += weight * (c.lambda.as_matrix() * xx).trace();
        cross += weight * 2.0 * (&c.phi * xu).trace();
        quadratic += weight * (c.eta.as_matrix() * uu).trace();
    };
    for j in strategy.t0_point..strategy.end_point {
        let t = grid.time(j);
        for (i, m) in strategy.moments.row(j).iter().enumerate() {
            parts(&coeffs.local(j, i, t), &m.start, dt / 6.0);
            parts(&coeffs.local(j, i, t + 0.5 * dt), &m.mid, 4.0 * dt / 6.0);
            parts(&coeffs.local(j, i, t + dt), &m.end, dt / 6.0);
        }
    }
    let terminal_cost: f64 = strategy
        .terminal_moment
        .iter()
        .enumerate()
        .map(|(i, s)| (terminal[if terminal.len() == 1 { 0 } else { i }].as_matrix() * s).trace())
        .sum();
    Ok(CostBreakdown {
        quadratic,
        cross,
        risk,
        terminal: terminal_cost,
        terminal_extrapolated: strategy.singular,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintReport {
    /// Root-mean-square `‖ξ X‖` per node at the strategy's end point.
    pub terminal_norm: Vec<f64>,
    pub constraint_tol: f64,
    pub kernel_pass: bool,
    pub value: f64,
    pub realized_cost: f64,
    pub value_gap: f64,
    /// `max terminal_norm / ε`.
    pub decay_constant: f64,
    /// Log-log slope of `‖X_s‖` against `T − s` over `T − s ∈ [ε, 10ε]`,
    /// when `ξ` is invertible.
    pub decay_slope: Option<f64>,
}

/// `5 ε ‖x0‖ / (T − t0)`.
pub fn constraint_tol(epsilon: f64, x0: &DVector<f64>, remaining: f64) -> f64 {
    5.0 * epsilon * x0.norm() / remaining
}

/// Terminal-constraint and value-identity report for a synthesized strategy.
pub fn verify(
    strategy: &Strategy,
    y: &RiccatiSolution,
    coeffs: &CoefficientSet,
    epsilon: f64,
) -> ConstraintReport {
    let tree = &strategy.tree;
    let grid = tree.grid();
    let end = strategy.end_point;
    let weights = tree.point_weights(end);
    let leaves = tree.leaf_count();
    let layer = tree.layer_of_point(end);
    let ctree = coeffs.tree();
    let xi_sq = |leaf: usize| {
        let x = coeffs.xi(leaf.min(ctree.leaf_count() - 1)).as_matrix();
        x.transpose() * x
    };
    let terminal_norm: Vec<f64> = strategy
        .terminal_moment
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d = s.nrows();
            let mut q = DMatrix::zeros(d, d);
            for leaf in 0..leaves {
                let p = if tree.depth() == 0 {
                    1.0
                } else {
                    tree.transition(tree.depth() - layer, i, leaf)
                };
                if p > 0.0 {
                    q += xi_sq(leaf) * p;
                }
            }
            ((q * s).trace() / weights[i]).max(0.0).sqrt()
        })
        .collect();
    let remaining = grid.horizon() - strategy.t0();
    let tol = constraint_tol(epsilon, &strategy.x0, remaining);
    let worst = terminal_norm.iter().cloned().fold(0.0, f64::max);
    let value = y.value(strategy.t0_point, &strategy.x0);
    let invertible = (0..coeffs.leaf_count()).all(|l| coeffs.xi(l).min_eigenvalue() > 1e-12);
    let decay_slope = if invertible {
        decay_slope(strategy, epsilon)
    } else {
        None
    };
    ConstraintReport {
        terminal_norm,
        constraint_tol: tol,
        kernel_pass: worst <= tol,
        value,
        realized_cost: strategy.realized_cost,
        value_gap: (strategy.realized_cost - value).abs() / value.max(1.0),
        decay_constant: worst / epsilon,
        decay_slope,
    }
}

fn decay_slope(strategy: &Strategy, epsilon: f64) -> Option<f64> {
    let grid = strategy.tree.grid();
    let (lo, hi) = (epsilon * (1.0 - 1e-9), 10.0 * epsilon * (1.0 + 1e-9));
    let pts: Vec<(f64, f64)> = (strategy.t0_point..=strategy.end_point)
        .filter_map(|p| {
            let r = grid.remaining(p);
            let x = strategy.rms_norm(p);
            (r >= lo && r <= hi && x > 0.0).then(|| (r.ln(), x.ln()))
        })
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// State and control samples of a deterministic strategy on one interval.
#[derive(Debug, Clone)]
pub(crate) struct IntervalSamples {
    pub x_mid: DVector<f64>,
    /// Control at the start, the midpoint and just before the end.
    pub u: [DVector<f64>; 3],
}

impl IntervalSamples {
    fn moments(&self, xa: &DVector<f64>, xb: &DVector<f64>, w: f64) -> IntervalMoments {
        IntervalMoments {
            start: outer_joint(xa, &self.u[0], w),
            mid: outer_joint(&self.x_mid, &self.u[1], w),
            end: outer_joint(xb, &self.u[2], w),
        }
    }
}

/// Builds a strategy whose state and control are the same on every node.
/// `x` holds the state at grid points `t0..=end`, `samples` one entry per
/// interval in `[t0, end)`.
pub(crate) fn deterministic_strategy(
    tree: ScenarioTree,
    t0_point: usize,
    x: &[DVector<f64>],
    samples: &[IntervalSamples],
    cost: CostBreakdown,
) -> Strategy {
    let end = t0_point + samples.len();
    let d = x[0].len();
    let zero = DVector::zeros(d);
    let mut x_rows = vec![vec![zero.clone()]; end + 1];
    let mut u_rows = vec![vec![zero.clone()]; end + 1];
    let blank = IntervalMoments {
        start: DMatrix::zeros(2 * d, 2 * d),
        mid: DMatrix::zeros(2 * d, 2 * d),
        end: DMatrix::zeros(2 * d, 2 * d),
    };
    let mut m_rows = vec![vec![blank]; tree.steps()];
    for (k, sample) in samples.iter().enumerate() {
        let j = t0_point + k;
        let nodes = tree.nodes_at_interval(j);
        let w = tree.layer_weights(tree.layer_of_interval(j));
        x_rows[j] = vec![x[k].clone(); nodes];
        u_rows[j] = vec![sample.u[0].clone(); nodes];
        m_rows[j] = w
            .iter()
            .map(|wi| sample.moments(&x[k], &x[k + 1], *wi))
            .collect();
    }
    let nodes = tree.nodes_at_point(end);
    x_rows[end] = vec![x[samples.len()].clone(); nodes];
    u_rows[end] = vec![samples.last().map_or(zero, |p| p.u[2].clone()); nodes];
    let xe = &x[samples.len()];
    let terminal_moment = tree
        .point_weights(end)
        .iter()
        .map(|wi| xe * xe.transpose() * *wi)
        .collect();
    Strategy {
        tree,
        t0_point,
        end_point: end,
        x0: x[0].clone(),
        x_path: NodeField::new(x_rows),
        u_path: NodeField::new(u_rows),
        moments: NodeField::new(m_rows),
        terminal_moment,
        realized_cost: cost.total(),
        cost,
        singular: false,
    }
}

fn linear_samples(
    coeffs: &CoefficientSet,
    c: &DVector<f64>,
    j: usize,
    node: usize,
    horizon: f64,
) -> IntervalSamples {
    let grid = coeffs.tree().grid();
    let t = grid.time(j);
    let at = |s: f64| c + &coeffs.local(j, node, s).a * (c * (horizon - s));
    let mid = t + 0.5 * grid.dt();
    IntervalSamples {
        x_mid: c * (horizon - mid),
        u: [at(t), at(mid), at(grid.time(j + 1))],
    }
}

/// Straight-line liquidation `X_s = (T − s)/(T − t0) x0` with
/// `u_s = x0/(T − t0) + A_s X_s`, and its exact expected cost.
pub fn benchmark_linear(
    coeffs: &CoefficientSet,
    t0_point: usize,
    x0: &DVector<f64>,
) -> Result<Strategy, ControlError> {
    let tree = *coeffs.tree();
    let grid = *tree.grid();
    let n = grid.steps();
    check_start(&tree, t0_point, n, coeffs.dim(), x0)?;
    let horizon = grid.horizon();
    let len = horizon - grid.time(t0_point);
    let c = x0 / len;
    let x: Vec<DVector<f64>> = (t0_point..=n).map(|p| &c * grid.remaining(p)).collect();

    let (mut quadratic, mut cross, mut risk) = (0.0, 0.0, 0.0);
    let mut u = Vec::with_capacity(n - t0_point);
    for j in t0_point..n {
        let (t0, t1) = (grid.time(j), grid.time(j + 1));
        let k = tree.layer_of_interval(j);
        let w = tree.layer_weights(k);
        for (i, wi) in w.iter().enumerate() {
            for (s, gw) in gauss_legendre5(t0, t1) {
                let lc = coeffs.local(j, i, s);
                let r = horizon - s;
                let xs = &c * r;
                let us = &c + &lc.a * &xs;
                quadratic += wi * gw * lc.eta.quad_form(&us);
                cross += wi * gw * 2.0 * us.dot(&(&lc.phi * &xs));
                risk += wi * gw * lc.lambda.quad_form(&xs);
            }
        }
        u.push(linear_samples(coeffs, &c, j, 0, horizon));
    }
    let cost = CostBreakdown {
        quadratic,
        cross,
        risk,
        terminal: 0.0,
        terminal_extrapolated: false,
    };
    let mut strategy = deterministic_strategy(tree, t0_point, &x, &u, cost);
    if !coeffs.a().is_broadcast() {
        // node-dependent A: per-node controls and moments
        for j in t0_point..n {
            let w = tree.layer_weights(tree.layer_of_interval(j));
            let (xa, xb) = (&x[j - t0_point], &x[j + 1 - t0_point]);
            let mut urow = Vec::with_capacity(w.len());
            let mut mrow = Vec::with_capacity(w.len());
            for (i, wi) in w.iter().enumerate() {
                let sample = linear_samples(coeffs, &c, j, i, horizon);
                mrow.push(sample.moments(xa, xb, *wi));
                urow.push(sample.u[0].clone());
            }
            *strategy.u_path.row_mut(j) = urow;
            *strategy.moments.row_mut(j) = mrow;
        }
    }
    Ok(strategy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffmodel::TimeGrid;
    use crate::riccati::{solve_ode, OdeSettings};

    fn scalar_set(n: usize, lambda: f64) -> CoefficientSet {
        let tree = ScenarioTree::deterministic(TimeGrid::new(1.0, n).unwrap());
        CoefficientSet::builder(tree, 1)
            .lambda_constant(SymMatrix::scalar(1, lambda))
            .build()
            .unwrap()
    }

    #[test]
    fn zero_state() {
        let c = scalar_set(20, 1.0);
        let y = solve_ode(&c, &SymMatrix::scalar(1, 3.0), &OdeSettings::default()).unwrap();
        let s = synthesize(&y, &c, 0, &DVector::zeros(1)).unwrap();
        assert_eq!(s.realized_cost, 0.0);
        assert!(s.x_path.iter().all(|(_, _, x)| x[0] == 0.0));
        let b = benchmark_linear(&c, 0, &DVector::zeros(1)).unwrap();
        assert_eq!(b.realized_cost, 0.0);
    }

    #[test]
    fn benchmark_scalar_cost() {
        let c = scalar_set(50, 1.0);
        let b = benchmark_linear(&c, 0, &DVector::from_element(1, 1.0)).unwrap();
        assert!((b.realized_cost - 4.0 / 3.0).abs() < 1e-12);
        assert!((b.x_path.get(50, 0)[0]).abs() < 1e-15);
        let lin = scalar_set(50, 0.0);
        let b = benchmark_linear(&lin, 0, &DVector::from_element(1, 1.0)).unwrap();
        assert!((b.realized_cost - 1.0).abs() < 1e-12);
        let e = evaluate_cost(&b, &lin, &[SymMatrix::zeros(1)]).unwrap();
        assert!((e.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn penalized_value_identity() {
        let c = scalar_set(400, 1.0);
        let y = solve_ode(&c, &SymMatrix::scalar(1, 2.0), &OdeSettings::default()).unwrap();
        let x0 = DVector::from_element(1, 1.5);
        let s = synthesize(&y, &c, 0, &x0).unwrap();
        let v = y.value(0, &x0);
        assert!(
            (s.realized_cost - v).abs() < 1e-5 * v,
            "{} {}",
            s.realized_cost,
            v
        );
        assert!(!s.singular);
    }
}
