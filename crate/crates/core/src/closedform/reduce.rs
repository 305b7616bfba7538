use nalgebra::DMatrix;

use super::ClosedFormError;
use crate::coeffmodel::{
    validate, CheckStatus, CoefficientSet, CoefficientSource, ItoEtaSpec, LocalCoeffs, NodeField,
    ScenarioTree,
};
use crate::matcore::SymMatrix;
use crate::quad::expm;
use crate::riccati::{solve_tree, OdeSettings, RiccatiSolution};

pub const ROUND_TRIP_TOL: f64 = 1e-8;

/// φ-free, A-free transform of a coefficient set.
///
/// With `Â = A + η⁻¹φ` and `dU = −U Â dt`, `U_0 = Id`, the field
/// `Ỹ = U⁻ᵀ Y U⁻¹` solves the Riccati equation with
/// `η̃ = U⁻ᵀ η U⁻¹` and `λ̃ = U⁻ᵀ (λ − φᵀ η⁻¹ φ) U⁻¹`. `Â` must be shared by
/// all nodes so that `U` is deterministic on the recombining tree.
#[derive(Debug, Clone)]
pub struct ReducedCoefficients {
    base: CoefficientSet,
    pub u_path: Vec<DMatrix<f64>>,
    u_inv_path: Vec<DMatrix<f64>>,
    /// `Â` per interval.
    pub a_hat: Vec<DMatrix<f64>>,
    /// Tilde fields at interval starts.
    pub eta_tilde: NodeField<SymMatrix>,
    pub lambda_tilde: NodeField<SymMatrix>,
    pub b_tilde: NodeField<SymMatrix>,
    pub sigma_tilde: NodeField<SymMatrix>,
    /// `max ‖Â‖`.
    pub delta_1: f64,
    /// Largest relative gap of the solve-then-transform check.
    pub round_trip_gap: f64,
}

fn spectral(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

impl ReducedCoefficients {
    pub fn base(&self) -> &CoefficientSet {
        &self.base
    }

    /// `U` and `U⁻¹` at time `t` inside interval `j`.
    fn u_at(&self, j: usize, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let s = t - self.base.tree().grid().time(j);
        if s == 0.0 || self.a_hat[j].iter().all(|x| *x == 0.0) {
            return (self.u_path[j].clone(), self.u_inv_path[j].clone());
        }
        (
            &self.u_path[j] * expm(&(&self.a_hat[j] * -s)),
            expm(&(&self.a_hat[j] * s)) * &self.u_inv_path[j],
        )
    }

    /// `U⁻ᵀ M U⁻¹` at grid point `p`.
    pub fn transform_at(&self, p: usize, m: &SymMatrix) -> SymMatrix {
        m.congruence(&self.u_inv_path[p])
    }

    /// Maps a solution of the original equation to the reduced variables.
    pub fn transform(&self, sol: &RiccatiSolution) -> RiccatiSolution {
        let mut out = sol.clone();
        out.y = sol.y.map(|p, _, y| self.transform_at(p, y));
        out.z = sol.z.map(|p, _, z| self.transform_at(p, z));
        let n = self.base.tree().steps();
        out.terminal = sol
            .terminal
            .iter()
            .map(|t| self.transform_at(n, t))
            .collect();
        out
    }
}

impl CoefficientSource for ReducedCoefficients {
    fn tree(&self) -> &ScenarioTree {
        self.base.tree()
    }

    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn local(&self, interval: usize, node: usize, t: f64) -> LocalCoeffs {
        let c = self.base.local(interval, node, t);
        let (u, u_inv) = self.u_at(interval, t);
        let lambda_hat = c.lambda.as_matrix() - c.phi.transpose() * c.eta_inv.as_matrix() * &c.phi;
        let d = self.dim();
        LocalCoeffs {
            eta: c.eta.congruence(&u_inv),
            eta_inv: c.eta_inv.congruence(&u.transpose()),
            lambda: SymMatrix::symmetrize(&lambda_hat).congruence(&u_inv),
            phi: DMatrix::zeros(d, d),
            a: DMatrix::zeros(d, d),
        }
    }

    fn varies_within(&self, interval: usize) -> bool {
        self.base.varies_within(interval) || self.a_hat[interval].iter().any(|x| *x != 0.0)
    }

    fn node_independent(&self) -> bool {
        self.base.node_independent()
    }
}

/// Builds the reduced coefficients and checks the round trip: the original
/// equation solved and transformed must match the reduced equation solved
/// directly, both from the terminal value at `n = 1`.
pub fn reduce(
    coeffs: &CoefficientSet,
    ito: &ItoEtaSpec,
    settings: &OdeSettings,
) -> Result<ReducedCoefficients, ClosedFormError> {
    let report = validate(coeffs, Some(ito));
    for name in ["A0", "D0", "D1"] {
        if let Some(c) = report.get(name) {
            if c.status == CheckStatus::Fail {
                return Err(ClosedFormError::Assumption {
                    name,
                    detail: c.detail.clone(),
                });
            }
        }
    }
    let tree = *coeffs.tree();
    let grid = *tree.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let d = coeffs.dim();

    let mut a_hat = Vec::with_capacity(n);
    for j in 0..n {
        if coeffs.has_phi() && coeffs.varies_within(j) {
            return Err(ClosedFormError::NodeDependentDrift(format!(
                "η varies inside interval {j} while φ ≠ 0"
            )));
        }
        let t = grid.time(j);
        let first = {
            let c = coeffs.local(j, 0, t);
            &c.a + c.eta_inv.as_matrix() * &c.phi
        };
        for i in 1..tree.nodes_at_interval(j) {
            let c = coeffs.local(j, i, t);
            let other = &c.a + c.eta_inv.as_matrix() * &c.phi;
            if (&other - &first).norm() > 1e-14 * first.norm().max(1.0) {
                return Err(ClosedFormError::NodeDependentDrift(format!(
                    "Â differs across nodes on interval {j}"
                )));
            }
        }
        a_hat.push(first);
    }
    let delta_1 = a_hat.iter().map(|a| a.norm()).fold(0.0, f64::max);

    let mut u_path = vec![DMatrix::identity(d, d)];
    let mut u_inv_path = vec![DMatrix::identity(d, d)];
    for a in &a_hat {
        let u = u_path.last().unwrap() * expm(&(a * -dt));
        let u_inv = expm(&(a * dt)) * u_inv_path.last().unwrap();
        u_path.push(u);
        u_inv_path.push(u_inv);
    }
    for (p, (u, ui)) in u_path.iter().zip(&u_inv_path).enumerate() {
        let bound = (delta_1 * grid.time(p)).exp() * (1.0 + 1e-10);
        if spectral(u) > bound || spectral(ui) > bound {
            return Err(ClosedFormError::Internal(format!(
                "‖U‖ exceeds e^(δ₁ t) at point {p}"
            )));
        }
    }

    let field = |f: &dyn Fn(usize, usize, &LocalCoeffs) -> SymMatrix| {
        NodeField::from_fn(
            n,
            |j| tree.nodes_at_interval(j),
            |j, i| f(j, i, &coeffs.local(j, i, grid.time(j))),
        )
    };
    let eta_tilde = field(&|j, _, c| c.eta.congruence(&u_inv_path[j]));
    let lambda_tilde = field(&|j, _, c| {
        let lh = c.lambda.as_matrix() - c.phi.transpose() * c.eta_inv.as_matrix() * &c.phi;
        SymMatrix::symmetrize(&lh).congruence(&u_inv_path[j])
    });
    let b_tilde = field(&|j, i, c| {
        let b = ito.b_eta.at(j, i, 0.0);
        let e = c.eta.as_matrix();
        let raw = b.as_matrix() + a_hat[j].transpose() * e + e * &a_hat[j];
        SymMatrix::symmetrize(&raw).congruence(&u_inv_path[j])
    });
    let sigma_tilde = field(&|j, i, _| ito.sigma_eta.get(j, i).congruence(&u_inv_path[j]));

    let mut reduced = ReducedCoefficients {
        base: coeffs.clone(),
        u_path,
        u_inv_path,
        a_hat,
        eta_tilde,
        lambda_tilde,
        b_tilde,
        sigma_tilde,
        delta_1,
        round_trip_gap: 0.0,
    };

    let terminal = coeffs.penalized_terminal(1.0);
    let original = solve_tree(coeffs, &terminal, settings)?;
    let mapped = reduced.transform(&original);
    let direct = solve_tree(&reduced, &mapped.terminal, settings)?;
    let mut gap = 0.0_f64;
    for (p, i, y) in direct.y.iter() {
        let m = mapped.y.get(p, i);
        gap = gap.max((y - m).norm() / m.norm().max(1.0));
    }
    if gap > ROUND_TRIP_TOL {
        return Err(ClosedFormError::RoundTrip { gap });
    }
    reduced.round_trip_gap = gap;
    Ok(reduced)
}
