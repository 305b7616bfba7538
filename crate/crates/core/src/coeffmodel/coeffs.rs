use nalgebra::DMatrix;

use super::tree::{NodeField, ScenarioTree};
use super::ModelError;
use crate::matcore::{truncate, SymMatrix};
use crate::quad::{exp_integral, expm, gauss_legendre5};

/// Piecewise matrix process on the intervals of a tree.
///
/// On interval `j` and node `i` the value at `t_j + u` is
/// `values[j][i] * exp(growth[j] * u)`; without growth it is piecewise
/// constant. The growth form covers `η_t = M_t G(t)` with `dG = G g dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixProcess {
    values: NodeField<SymMatrix>,
    growth: Option<Vec<DMatrix<f64>>>,
}

impl MatrixProcess {
    pub fn piecewise(values: NodeField<SymMatrix>) -> Self {
        MatrixProcess {
            values,
            growth: None,
        }
    }

    pub fn constant(intervals: usize, value: SymMatrix) -> Self {
        Self::piecewise(NodeField::constant(intervals, value))
    }

    pub fn with_growth(
        values: NodeField<SymMatrix>,
        growth: Vec<DMatrix<f64>>,
    ) -> Result<Self, ModelError> {
        if growth.len() != values.len() {
            return Err(ModelError::FieldLength {
                field: "growth",
                expected: values.len(),
                found: growth.len(),
            });
        }
        let any = growth.iter().any(|g| g.iter().any(|x| *x != 0.0));
        Ok(MatrixProcess {
            values,
            growth: any.then_some(growth),
        })
    }

    pub fn values(&self) -> &NodeField<SymMatrix> {
        &self.values
    }

    pub fn growth(&self) -> Option<&[DMatrix<f64>]> {
        self.growth.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn varies_within(&self, j: usize) -> bool {
        self.growth
            .as_ref()
            .is_some_and(|g| g[j].iter().any(|x| *x != 0.0))
    }

    /// Value at offset `u` into interval `j`.
    pub fn at(&self, j: usize, node: usize, u: f64) -> SymMatrix {
        let base = self.values.get(j, node);
        match &self.growth {
            Some(g) if u != 0.0 && g[j].iter().any(|x| *x != 0.0) => {
                SymMatrix::symmetrize(&(base.as_matrix() * expm(&(&g[j] * u))))
            }
            _ => base.clone(),
        }
    }

    /// `∫ value⁻¹` over offsets `[u0, u1]` of interval `j`, exact for both forms.
    pub fn inverse_integral(
        &self,
        j: usize,
        node: usize,
        u0: f64,
        u1: f64,
    ) -> Result<SymMatrix, ModelError> {
        let inv = self.values.get(j, node).inverse()?;
        match &self.growth {
            Some(g) if g[j].iter().any(|x| *x != 0.0) => {
                let phi = exp_integral(&g[j], u1) - exp_integral(&g[j], u0);
                Ok(SymMatrix::symmetrize(&(phi * inv.as_matrix())))
            }
            _ => Ok(inv.scale(u1 - u0)),
        }
    }

    /// `Σ_i w_i value(j, i, u)` over the nodes of interval `j`.
    pub fn mean(&self, tree: &ScenarioTree, j: usize, u: f64) -> SymMatrix {
        let w = tree.layer_weights(tree.layer_of_interval(j));
        let row = self.values.row(j);
        if row.len() == 1 {
            return self.at(j, 0, u);
        }
        let mut acc = DMatrix::zeros(row[0].dim(), row[0].dim());
        for (i, wi) in w.iter().enumerate() {
            acc += self.at(j, i, u).as_matrix() * *wi;
        }
        SymMatrix::symmetrize(&acc)
    }
}

/// Coefficients frozen at one interval, node and time.
#[derive(Debug, Clone)]
pub struct LocalCoeffs {
    pub eta: SymMatrix,
    pub eta_inv: SymMatrix,
    pub lambda: SymMatrix,
    pub phi: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

/// Anything the Riccati solvers can integrate: the original coefficients or
/// their reduced (φ-free, A-free) transform.
pub trait CoefficientSource: Sync {
    fn tree(&self) -> &ScenarioTree;
    fn dim(&self) -> usize;
    fn local(&self, interval: usize, node: usize, t: f64) -> LocalCoeffs;
    /// Whether `local` changes inside interval `interval`.
    fn varies_within(&self, interval: usize) -> bool;
    /// Whether every node sees the same coefficients.
    fn node_independent(&self) -> bool;

    /// `∫_from^to η_s⁻¹ ds` inside one interval.
    fn eta_inv_integral(&self, interval: usize, node: usize, from: f64, to: f64) -> SymMatrix {
        if !self.varies_within(interval) {
            return self.local(interval, node, from).eta_inv.scale(to - from);
        }
        let d = self.dim();
        let mut acc = DMatrix::zeros(d, d);
        for (s, w) in gauss_legendre5(from, to) {
            acc += self.local(interval, node, s).eta_inv.as_matrix() * w;
        }
        SymMatrix::symmetrize(&acc)
    }
}

/// Time- and node-indexed coefficients `(η, λ, φ, A)` with terminal data
/// `(θ, ξ)` and the constants `δ`, `K`.
///
/// Interval fields hold one row per grid interval; a row with a single entry
/// is shared by every node. `theta` and `xi` hold one entry per leaf, or a
/// single shared entry.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    tree: ScenarioTree,
    dim: usize,
    eta: MatrixProcess,
    eta_inv: NodeField<SymMatrix>,
    lambda: NodeField<SymMatrix>,
    phi: NodeField<DMatrix<f64>>,
    a: NodeField<DMatrix<f64>>,
    theta: Vec<SymMatrix>,
    xi: Vec<SymMatrix>,
    delta: f64,
    k_bound: f64,
}

#[derive(Debug, Clone)]
pub struct CoefficientBuilder {
    tree: ScenarioTree,
    dim: usize,
    eta: Option<MatrixProcess>,
    lambda: Option<NodeField<SymMatrix>>,
    phi: Option<NodeField<DMatrix<f64>>>,
    a: Option<NodeField<DMatrix<f64>>>,
    theta: Option<Vec<SymMatrix>>,
    xi: Option<Vec<SymMatrix>>,
    delta: Option<f64>,
    k_bound: Option<f64>,
}

impl CoefficientBuilder {
    pub fn eta(mut self, eta: MatrixProcess) -> Self {
        self.eta = Some(eta);
        self
    }

    pub fn eta_constant(self, eta: SymMatrix) -> Self {
        let n = self.tree.steps();
        self.eta(MatrixProcess::constant(n, eta))
    }

    pub fn lambda(mut self, lambda: NodeField<SymMatrix>) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn lambda_constant(self, lambda: SymMatrix) -> Self {
        let n = self.tree.steps();
        self.lambda(NodeField::constant(n, lambda))
    }

    pub fn phi(mut self, phi: NodeField<DMatrix<f64>>) -> Self {
        self.phi = Some(phi);
        self
    }

    pub fn phi_constant(self, phi: DMatrix<f64>) -> Self {
        let n = self.tree.steps();
        self.phi(NodeField::constant(n, phi))
    }

    pub fn a(mut self, a: NodeField<DMatrix<f64>>) -> Self {
        self.a = Some(a);
        self
    }

    pub fn a_constant(self, a: DMatrix<f64>) -> Self {
        let n = self.tree.steps();
        self.a(NodeField::constant(n, a))
    }

    pub fn theta(mut self, theta: Vec<SymMatrix>) -> Self {
        self.theta = Some(theta);
        self
    }

    pub fn xi(mut self, xi: Vec<SymMatrix>) -> Self {
        self.xi = Some(xi);
        self
    }

    pub fn delta(mut self, delta: f64) -> Self {
        self.delta = Some(delta);
        self
    }

    pub fn k_bound(mut self, k: f64) -> Self {
        self.k_bound = Some(k);
        self
    }

    pub fn build(self) -> Result<CoefficientSet, ModelError> {
        let d = self.dim;
        let tree = self.tree;
        let n = tree.steps();
        let eta = self
            .eta
            .unwrap_or_else(|| MatrixProcess::constant(n, SymMatrix::identity(d)));
        let lambda = self
            .lambda
            .unwrap_or_else(|| NodeField::constant(n, SymMatrix::zeros(d)));
        let phi = self
            .phi
            .unwrap_or_else(|| NodeField::constant(n, DMatrix::zeros(d, d)));
        let a = self
            .a
            .unwrap_or_else(|| NodeField::constant(n, DMatrix::zeros(d, d)));
        let theta = self.theta.unwrap_or_else(|| vec![SymMatrix::zeros(d)]);
        let xi = self.xi.unwrap_or_else(|| vec![SymMatrix::identity(d)]);

        check_shape(&tree, "eta", eta.values(), |m| m.dim(), d)?;
        check_shape(&tree, "lambda", &lambda, |m| m.dim(), d)?;
        check_shape(&tree, "phi", &phi, square_dim, d)?;
        check_shape(&tree, "a", &a, square_dim, d)?;
        if let Some(g) = eta.growth() {
            for m in g {
                if square_dim(m) != d {
                    return Err(ModelError::Dimension {
                        field: "growth",
                        expected: d,
                        found: square_dim(m),
                    });
                }
            }
        }
        for (field, leaves) in [("theta", &theta), ("xi", &xi)] {
            if leaves.len() != 1 && leaves.len() != tree.leaf_count() {
                return Err(ModelError::NodeCount {
                    field,
                    index: tree.steps(),
                    expected: tree.leaf_count(),
                    found: leaves.len(),
                });
            }
            for (leaf, m) in leaves.iter().enumerate() {
                if m.dim() != d {
                    return Err(ModelError::Dimension {
                        field,
                        expected: d,
                        found: m.dim(),
                    });
                }
                let min_eigenvalue = m.min_eigenvalue();
                if min_eigenvalue < -crate::matcore::PSD_TOL || !m.is_finite() {
                    return Err(ModelError::NotPsd {
                        field,
                        leaf,
                        min_eigenvalue,
                    });
                }
            }
        }

        let dt = tree.grid().dt();
        for (j, i, m) in eta.values().iter() {
            for u in [0.0, dt] {
                let v = if u == 0.0 { m.clone() } else { eta.at(j, i, u) };
                let min_eigenvalue = v.min_eigenvalue();
                if !(min_eigenvalue > 0.0) || !v.is_finite() {
                    return Err(ModelError::NotPositiveDefinite {
                        field: "eta",
                        interval: j,
                        node: i,
                        min_eigenvalue,
                    });
                }
                if !eta.varies_within(j) {
                    break;
                }
            }
        }
        let eta_inv = eta
            .values()
            .map(|_, _, m| m.inverse().expect("eta checked positive definite"));

        let mut set = CoefficientSet {
            tree,
            dim: d,
            eta,
            eta_inv,
            lambda,
            phi,
            a,
            theta,
            xi,
            delta: 0.0,
            k_bound: 0.0,
        };
        set.delta = match self.delta {
            Some(v) => v,
            None => set.largest_feasible_delta(),
        };
        set.k_bound = match self.k_bound {
            Some(v) => v,
            None => set.max_a_norm(),
        };
        if !(set.delta.is_finite() && set.delta >= 0.0) {
            return Err(ModelError::InvalidGenerator(format!(
                "delta must be nonnegative, got {}",
                set.delta
            )));
        }
        Ok(set)
    }
}

fn square_dim(m: &DMatrix<f64>) -> usize {
    if m.nrows() == m.ncols() {
        m.nrows()
    } else {
        usize::MAX
    }
}

fn check_shape<T: Clone>(
    tree: &ScenarioTree,
    field: &'static str,
    f: &NodeField<T>,
    dim_of: impl Fn(&T) -> usize,
    d: usize,
) -> Result<(), ModelError> {
    if f.len() != tree.steps() {
        return Err(ModelError::FieldLength {
            field,
            expected: tree.steps(),
            found: f.len(),
        });
    }
    for j in 0..f.len() {
        let row = f.row(j);
        let expected = tree.nodes_at_interval(j);
        if row.len() != 1 && row.len() != expected {
            return Err(ModelError::NodeCount {
                field,
                index: j,
                expected,
                found: row.len(),
            });
        }
        for m in row {
            let found = dim_of(m);
            if found != d {
                return Err(ModelError::Dimension {
                    field,
                    expected: d,
                    found,
                });
            }
        }
    }
    Ok(())
}

impl CoefficientSet {
    pub fn builder(tree: ScenarioTree, dim: usize) -> CoefficientBuilder {
        CoefficientBuilder {
            tree,
            dim,
            eta: None,
            lambda: None,
            phi: None,
            a: None,
            theta: None,
            xi: None,
            delta: None,
            k_bound: None,
        }
    }

    pub fn eta(&self) -> &MatrixProcess {
        &self.eta
    }

    pub fn lambda(&self) -> &NodeField<SymMatrix> {
        &self.lambda
    }

    pub fn phi(&self) -> &NodeField<DMatrix<f64>> {
        &self.phi
    }

    pub fn a(&self) -> &NodeField<DMatrix<f64>> {
        &self.a
    }

    pub fn theta(&self, leaf: usize) -> &SymMatrix {
        leaf_entry(&self.theta, leaf)
    }

    pub fn xi(&self, leaf: usize) -> &SymMatrix {
        leaf_entry(&self.xi, leaf)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn k_bound(&self) -> f64 {
        self.k_bound
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    /// All coefficients are shared by every node, so the tree is irrelevant.
    pub fn is_deterministic(&self) -> bool {
        self.eta.values().is_broadcast()
            && self.lambda.is_broadcast()
            && self.phi.is_broadcast()
            && self.a.is_broadcast()
            && self.theta.len() == 1
            && self.xi.len() == 1
    }

    pub fn has_phi(&self) -> bool {
        self.phi.iter().any(|(_, _, m)| m.iter().any(|x| *x != 0.0))
    }

    pub fn has_a(&self) -> bool {
        self.a.iter().any(|(_, _, m)| m.iter().any(|x| *x != 0.0))
    }

    /// Penalized terminal value `n ξ + truncate(θ, n)` at each leaf.
    pub fn penalized_terminal(&self, n: f64) -> Vec<SymMatrix> {
        let leaves = if self.theta.len() == 1 && self.xi.len() == 1 {
            1
        } else {
            self.tree.leaf_count()
        };
        (0..leaves)
            .map(|l| &self.xi(l).scale(n) + &truncate(self.theta(l), n))
            .collect()
    }

    /// The same coefficients on a different tree of the same grid, with every
    /// node-dependent field required to be shared.
    pub fn embed(&self, tree: ScenarioTree) -> Result<CoefficientSet, ModelError> {
        let mut b = CoefficientSet::builder(tree, self.dim)
            .eta(self.eta.clone())
            .lambda(self.lambda.clone())
            .phi(self.phi.clone())
            .a(self.a.clone())
            .theta(self.theta.clone())
            .xi(self.xi.clone());
        b = b.delta(self.delta).k_bound(self.k_bound);
        b.build()
    }

    pub fn leaf_count(&self) -> usize {
        self.tree.leaf_count()
    }

    fn max_a_norm(&self) -> f64 {
        self.a.iter().map(|(_, _, m)| m.norm()).fold(0.0, f64::max)
    }

    /// Smallest eigenvalue of `[[λ, φᵀ], [φ, η − δ Id]]`.
    pub fn a0_block_min_eigenvalue(&self, j: usize, node: usize, u: f64, delta: f64) -> f64 {
        let d = self.dim;
        let eta = self.eta.at(j, node, u);
        let lambda = self.lambda.get(j, node);
        let phi = self.phi.get(j, node);
        let mut block = DMatrix::zeros(2 * d, 2 * d);
        block.view_mut((0, 0), (d, d)).copy_from(lambda.as_matrix());
        block.view_mut((0, d), (d, d)).copy_from(&phi.transpose());
        block.view_mut((d, 0), (d, d)).copy_from(phi);
        block
            .view_mut((d, d), (d, d))
            .copy_from(&(eta.as_matrix() - DMatrix::identity(d, d) * delta));
        SymMatrix::symmetrize(&block).min_eigenvalue()
    }

    /// Largest `δ` for which the A0 block stays PSD at every index, by bisection.
    fn largest_feasible_delta(&self) -> f64 {
        let dt = self.tree.grid().dt();
        let mut hi = f64::INFINITY;
        for (j, i, m) in self.eta.values().iter() {
            hi = hi.min(m.min_eigenvalue());
            if self.eta.varies_within(j) {
                hi = hi.min(self.eta.at(j, i, dt).min_eigenvalue());
            }
        }
        let feasible = |delta: f64| {
            self.eta.values().iter().all(|(j, i, _)| {
                let ends: &[f64] = if self.eta.varies_within(j) {
                    &[0.0, dt]
                } else {
                    &[0.0]
                };
                ends.iter()
                    .all(|u| self.a0_block_min_eigenvalue(j, i, *u, delta) >= 0.0)
            })
        };
        if feasible(hi) {
            return hi;
        }
        let mut lo = 0.0;
        if !feasible(lo) {
            return 0.0;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

fn leaf_entry(v: &[SymMatrix], leaf: usize) -> &SymMatrix {
    if v.len() == 1 {
        &v[0]
    } else {
        &v[leaf]
    }
}

impl CoefficientSource for CoefficientSet {
    fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn local(&self, interval: usize, node: usize, t: f64) -> LocalCoeffs {
        let (eta, eta_inv) = if self.eta.varies_within(interval) {
            let u = t - self.tree.grid().time(interval);
            let eta = self.eta.at(interval, node, u);
            let inv = eta.inverse().expect("eta positive definite");
            (eta, inv)
        } else {
            (
                self.eta.values().get(interval, node).clone(),
                self.eta_inv.get(interval, node).clone(),
            )
        };
        LocalCoeffs {
            eta,
            eta_inv,
            lambda: self.lambda.get(interval, node).clone(),
            phi: self.phi.get(interval, node).clone(),
            a: self.a.get(interval, node).clone(),
        }
    }

    fn varies_within(&self, interval: usize) -> bool {
        self.eta.varies_within(interval)
    }

    fn node_independent(&self) -> bool {
        self.eta.values().is_broadcast()
            && self.lambda.is_broadcast()
            && self.phi.is_broadcast()
            && self.a.is_broadcast()
    }

    fn eta_inv_integral(&self, interval: usize, node: usize, from: f64, to: f64) -> SymMatrix {
        let t0 = self.tree.grid().time(interval);
        self.eta
            .inverse_integral(interval, node, from - t0, to - t0)
            .expect("eta positive definite")
    }
}

/// Itô data `dη = b dt + σ dW` with the bound `K^η`.
///
/// The drift uses the same piecewise/growth form as `η` itself, so the
/// multiplicative-drift case `b_t = η_t g(t)` is represented exactly.
#[derive(Debug, Clone)]
pub struct ItoEtaSpec {
    pub b_eta: MatrixProcess,
    pub sigma_eta: NodeField<SymMatrix>,
    pub k_eta: f64,
}

impl ItoEtaSpec {
    pub fn zero(intervals: usize, dim: usize) -> Self {
        ItoEtaSpec {
            b_eta: MatrixProcess::constant(intervals, SymMatrix::zeros(dim)),
            sigma_eta: NodeField::constant(intervals, SymMatrix::zeros(dim)),
            k_eta: 0.0,
        }
    }

    /// `b = η g` for `η` given in growth form; no volatility beyond the
    /// martingale factor, which is read off the tree.
    pub fn from_eta(eta: &MatrixProcess, tree: &ScenarioTree) -> Self {
        let d = eta.values().row(0)[0].dim();
        let b_values = match eta.growth() {
            Some(g) => eta
                .values()
                .map(|j, _, m| SymMatrix::symmetrize(&(m.as_matrix() * &g[j]))),
            None => eta.values().map(|_, _, _| SymMatrix::zeros(d)),
        };
        let b_eta = match eta.growth() {
            Some(g) => MatrixProcess::with_growth(b_values, g.to_vec()).expect("lengths match"),
            None => MatrixProcess::piecewise(b_values),
        };
        let sigma_eta = tree_volatility(eta, tree);
        let k_eta = bound_of(&b_eta, tree).max(
            sigma_eta
                .iter()
                .map(|(_, _, m)| m.norm())
                .fold(0.0, f64::max),
        );
        ItoEtaSpec {
            b_eta,
            sigma_eta,
            k_eta,
        }
    }

    pub fn with_bound(mut self, k_eta: f64) -> Self {
        self.k_eta = k_eta;
        self
    }
}

/// `(η_up − η_down) / (2 sqrt(Δ))` at the next layer, constant over the layer.
fn tree_volatility(eta: &MatrixProcess, tree: &ScenarioTree) -> NodeField<SymMatrix> {
    let n = tree.steps();
    let d = eta.values().row(0)[0].dim();
    let depth = tree.depth();
    NodeField::from_fn(
        n,
        |j| tree.nodes_at_interval(j),
        |j, i| {
            let k = tree.layer_of_interval(j);
            if depth == 0 || k + 1 >= depth {
                return SymMatrix::zeros(d);
            }
            let next = tree.layer_start(k + 1);
            let up = eta.values().get(next, i + 1);
            let down = eta.values().get(next, i);
            (up - down).scale(0.5 / tree.increment())
        },
    )
}

fn bound_of(p: &MatrixProcess, tree: &ScenarioTree) -> f64 {
    let dt = tree.grid().dt();
    p.values()
        .iter()
        .map(|(j, i, m)| {
            if p.varies_within(j) {
                m.norm().max(p.at(j, i, dt).norm())
            } else {
                m.norm()
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffmodel::TimeGrid;

    fn tree(n: usize, depth: usize) -> ScenarioTree {
        ScenarioTree::build(TimeGrid::new(1.0, n).unwrap(), depth).unwrap()
    }

    #[test]
    fn defaults_and_delta() {
        let c = CoefficientSet::builder(tree(4, 0), 2).build().unwrap();
        assert!((c.delta() - 1.0).abs() < 1e-12);
        assert_eq!(c.k_bound(), 0.0);
        assert!(c.is_deterministic());
        let term = c.penalized_terminal(3.0);
        assert_eq!(term.len(), 1);
        assert_eq!(term[0], SymMatrix::scalar(2, 3.0));
    }

    #[test]
    fn delta_with_cross_term() {
        // block [[1, 0.5], [0.5, 1 - δ]] is PSD iff δ ≤ 0.75
        let c = CoefficientSet::builder(tree(2, 0), 1)
            .lambda_constant(SymMatrix::scalar(1, 1.0))
            .phi_constant(DMatrix::from_element(1, 1, 0.5))
            .build()
            .unwrap();
        assert!((c.delta() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let t = tree(4, 2);
        let bad = CoefficientSet::builder(t, 1)
            .lambda(NodeField::constant(3, SymMatrix::zeros(1)))
            .build();
        assert!(matches!(bad, Err(ModelError::FieldLength { .. })));
        let rows = vec![vec![SymMatrix::zeros(1); 3]; 4];
        let bad = CoefficientSet::builder(t, 1)
            .lambda(NodeField::new(rows))
            .build();
        assert!(matches!(bad, Err(ModelError::NodeCount { .. })));
        let bad = CoefficientSet::builder(t, 1)
            .eta_constant(SymMatrix::scalar(1, -1.0))
            .build();
        assert!(matches!(bad, Err(ModelError::NotPositiveDefinite { .. })));
        let bad = CoefficientSet::builder(t, 1)
            .xi(vec![SymMatrix::scalar(1, -1.0)])
            .build();
        assert!(matches!(bad, Err(ModelError::NotPsd { .. })));
    }

    #[test]
    fn growth_process_integrals() {
        let g = DMatrix::from_element(1, 1, 0.4);
        let p = MatrixProcess::with_growth(
            NodeField::constant(2, SymMatrix::scalar(1, 2.0)),
            vec![g.clone(); 2],
        )
        .unwrap();
        let v = p.at(1, 0, 0.25).get(0, 0);
        assert!((v - 2.0 * (0.1f64).exp()).abs() < 1e-14);
        let integral = p.inverse_integral(0, 0, 0.0, 0.5).unwrap().get(0, 0);
        let exact = (1.0 - (-0.2f64).exp()) / 0.4 / 2.0;
        assert!((integral - exact).abs() < 1e-14);
    }

    #[test]
    fn local_broadcasts() {
        let t = tree(4, 2);
        let rows = (0..4)
            .map(|j| {
                (0..t.nodes_at_interval(j))
                    .map(|i| SymMatrix::scalar(1, 1.0 + i as f64))
                    .collect()
            })
            .collect();
        let c = CoefficientSet::builder(t, 1)
            .eta(MatrixProcess::piecewise(NodeField::new(rows)))
            .build()
            .unwrap();
        assert_eq!(c.local(3, 1, 0.8).eta.get(0, 0), 2.0);
        assert_eq!(c.local(3, 1, 0.8).eta_inv.get(0, 0), 0.5);
        assert_eq!(c.local(3, 1, 0.8).lambda.get(0, 0), 0.0);
        assert!(!c.is_deterministic());
    }
}
