use serde::Serialize;

use super::coeffs::{CoefficientSet, CoefficientSource, ItoEtaSpec};
use crate::matcore::{SymMatrix, PSD_TOL};

/// `‖η_s⁻¹ η_t‖` above this is reported as implausible for a continuous-time model.
pub const C1_WARN_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    NotEvaluated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Location {
    pub interval: usize,
    pub node: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    pub witness: f64,
    pub location: Option<Location>,
    pub detail: String,
    pub warning: Option<String>,
}

impl AssumptionCheck {
    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn passes(&self, name: &str) -> bool {
        self.get(name).is_some_and(|c| c.passed())
    }
}

fn status(ok: bool) -> CheckStatus {
    if ok {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    }
}

/// Tracks the extreme value of a quantity and where it occurred.
struct Extreme {
    value: f64,
    at: Option<Location>,
    max: bool,
}

impl Extreme {
    fn max() -> Self {
        Extreme {
            value: f64::NEG_INFINITY,
            at: None,
            max: true,
        }
    }
    fn min() -> Self {
        Extreme {
            value: f64::INFINITY,
            at: None,
            max: false,
        }
    }
    fn push(&mut self, v: f64, interval: usize, node: usize) {
        let better = if self.max {
            v > self.value
        } else {
            v < self.value
        } || v.is_nan();
        if better {
            self.value = v;
            self.at = Some(Location { interval, node });
        }
    }
    fn value_or(&self, empty: f64) -> f64 {
        if self.at.is_none() {
            empty
        } else {
            self.value
        }
    }
}

/// Evaluates every assumption by exact finite sums over grid intervals and
/// tree nodes. Failures are report entries, never errors.
pub fn validate(coeffs: &CoefficientSet, ito: Option<&ItoEtaSpec>) -> AssumptionReport {
    let tree = *coeffs.tree();
    let n = tree.steps();
    let dt = tree.grid().dt();
    let weights: Vec<Vec<f64>> = (0..tree.interval_layers())
        .map(|k| tree.layer_weights(k))
        .collect();
    let weight = |j: usize, i: usize| weights[tree.layer_of_interval(j)][i];
    let nodes = |j: usize| tree.nodes_at_interval(j);
    let eta = coeffs.eta();
    let ends = |j: usize| -> &'static [f64] {
        if eta.varies_within(j) {
            &[0.0, 1.0]
        } else {
            &[0.0]
        }
    };

    let mut checks = Vec::new();

    let mut a0 = Extreme::min();
    for j in 0..n {
        for i in 0..nodes(j) {
            for u in ends(j) {
                a0.push(
                    coeffs.a0_block_min_eigenvalue(j, i, u * dt, coeffs.delta()),
                    j,
                    i,
                );
            }
        }
    }
    let w = a0.value_or(0.0);
    checks.push(AssumptionCheck {
        name: "A0",
        status: status(w >= -PSD_TOL),
        witness: w,
        location: a0.at,
        detail: format!(
            "min eigenvalue of [[λ, φᵀ], [φ, η − δ Id]] with δ = {}",
            coeffs.delta()
        ),
        warning: None,
    });

    let mut a1 = Extreme::max();
    for j in 0..n {
        for i in 0..nodes(j) {
            a1.push(coeffs.a().get(j, i).norm(), j, i);
        }
    }
    let w = a1.value_or(0.0);
    checks.push(AssumptionCheck {
        name: "A1",
        status: status(w <= coeffs.k_bound() * (1.0 + 1e-12)),
        witness: w,
        location: a1.at,
        detail: format!("max ‖A‖ against K = {}", coeffs.k_bound()),
        warning: None,
    });

    let mut moment_lp = 0.0;
    let mut moment_eta = 0.0;
    let mut eta_max = Extreme::max();
    let mut lambda_max = Extreme::max();
    let mut phi_max = Extreme::max();
    let mut eta_sq = 0.0;
    let mut eta_inv_norm = 0.0;
    for j in 0..n {
        for i in 0..nodes(j) {
            let wt = weight(j, i) * dt;
            let l = coeffs.lambda().get(j, i).norm();
            let p = coeffs.phi().get(j, i).norm();
            moment_lp += wt * (l.powi(3) + p.powi(3));
            lambda_max.push(l, j, i);
            phi_max.push(p, j, i);
            let mut e_norm = 0.0_f64;
            let mut e_inv = 0.0_f64;
            for u in ends(j) {
                let loc = coeffs.local(j, i, tree.grid().time(j) + u * dt);
                e_norm = e_norm.max(loc.eta.norm());
                e_inv = e_inv.max(loc.eta_inv.norm());
            }
            moment_eta += wt * e_norm.powi(3);
            eta_sq += wt * e_norm.powi(2);
            eta_inv_norm += wt * e_inv;
            eta_max.push(e_norm, j, i);
        }
    }
    checks.push(AssumptionCheck {
        name: "A2",
        status: status(moment_lp.is_finite()),
        witness: moment_lp,
        location: None,
        detail: "E ∫ (‖λ‖³ + ‖φ‖³) ds".into(),
        warning: None,
    });

    let leaf_w = tree.leaf_weights();
    let theta_moment: f64 = leaf_w
        .iter()
        .enumerate()
        .map(|(l, w)| w * coeffs.theta(l).norm().powi(3))
        .sum();
    checks.push(AssumptionCheck {
        name: "A3",
        status: status(theta_moment.is_finite()),
        witness: theta_moment,
        location: None,
        detail: "E ‖θ‖³".into(),
        warning: None,
    });

    checks.push(AssumptionCheck {
        name: "B2",
        status: status(moment_eta.is_finite()),
        witness: moment_eta,
        location: None,
        detail: "E ∫ ‖η‖³ ds".into(),
        warning: None,
    });

    let identity = SymMatrix::identity(coeffs.dim());
    let mut c0 = Extreme::max();
    for j in 0..n {
        for i in 0..nodes(j) {
            let dev = coeffs.lambda().get(j, i).norm()
                + coeffs.phi().get(j, i).norm()
                + coeffs.a().get(j, i).norm();
            c0.push(dev, j, i);
        }
    }
    let xi_dev = (0..tree.leaf_count())
        .map(|l| (coeffs.xi(l) - &identity).norm())
        .fold(0.0, f64::max);
    let w = c0.value_or(0.0).max(xi_dev);
    checks.push(AssumptionCheck {
        name: "C0",
        status: status(w == 0.0),
        witness: w,
        location: if xi_dev >= c0.value_or(0.0) {
            None
        } else {
            c0.at
        },
        detail: "largest of ‖λ‖ + ‖φ‖ + ‖A‖ and ‖ξ − Id‖".into(),
        warning: None,
    });

    let eta_t_sq: f64 = {
        let last = n - 1;
        (0..nodes(last))
            .map(|i| {
                weight(last, i)
                    * coeffs
                        .local(last, i, tree.grid().horizon())
                        .eta
                        .norm()
                        .powi(2)
            })
            .sum()
    };
    let c1_value = eta_t_sq + eta_sq + eta_inv_norm;
    let (ratio, ratio_at) = max_eta_ratio(coeffs);
    checks.push(AssumptionCheck {
        name: "C1",
        status: status(c1_value.is_finite() && ratio.is_finite()),
        witness: c1_value,
        location: ratio_at,
        detail: format!("E[‖η_T‖² + ∫ (‖η‖² + ‖η⁻¹‖) ds]; max ‖η_s⁻¹ η_t‖ = {ratio:e}"),
        warning: (ratio > C1_WARN_THRESHOLD)
            .then(|| format!("max ‖η_s⁻¹ η_t‖ = {ratio:e} exceeds {C1_WARN_THRESHOLD:e}")),
    });

    match ito {
        Some(spec) => {
            let mut d0 = Extreme::max();
            for j in 0..n {
                for i in 0..nodes(j) {
                    let mut b = spec.b_eta.values().get(j, i).norm();
                    if spec.b_eta.varies_within(j) {
                        b = b.max(spec.b_eta.at(j, i, dt).norm());
                    }
                    d0.push(b.max(spec.sigma_eta.get(j, i).norm()), j, i);
                }
            }
            let w = d0.value_or(0.0);
            checks.push(AssumptionCheck {
                name: "D0",
                status: status(w <= spec.k_eta * (1.0 + 1e-12)),
                witness: w,
                location: d0.at,
                detail: format!("max(‖b^η‖, ‖σ^η‖) against K^η = {}", spec.k_eta),
                warning: None,
            });
        }
        None => checks.push(AssumptionCheck {
            name: "D0",
            status: CheckStatus::NotEvaluated,
            witness: f64::NAN,
            location: None,
            detail: "no Itô specification for η supplied".into(),
            warning: None,
        }),
    }

    let bounds = [
        lambda_max.value_or(0.0),
        phi_max.value_or(0.0),
        a1.value_or(0.0),
        eta_max.value_or(0.0),
    ];
    let w = bounds.iter().cloned().fold(0.0, f64::max);
    checks.push(AssumptionCheck {
        name: "D1",
        status: status(xi_dev == 0.0 && w <= coeffs.k_bound() * (1.0 + 1e-12)),
        witness: w,
        location: None,
        detail: format!(
            "max of ‖λ‖, ‖φ‖, ‖A‖, ‖η‖ against K = {}; ‖ξ − Id‖ = {xi_dev}",
            coeffs.k_bound()
        ),
        warning: None,
    });

    AssumptionReport { checks }
}

/// Largest `‖η_s⁻¹ η_t‖` over node lineages, with `s`, `t` at interval starts
/// of distinct layers (and within the deterministic root layer).
fn max_eta_ratio(coeffs: &CoefficientSet) -> (f64, Option<Location>) {
    let tree = coeffs.tree();
    let eta = coeffs.eta();
    let mut starts: Vec<usize> = (0..tree.interval_layers())
        .map(|k| tree.layer_start(k))
        .collect();
    starts.push(tree.steps() - 1);
    starts.dedup();
    let mut best = (0.0_f64, None);
    for (a, &js) in starts.iter().enumerate() {
        let ks = tree.layer_of_interval(js);
        for i in 0..=ks {
            let inv = eta
                .values()
                .get(js, i)
                .inverse()
                .expect("eta positive definite");
            for &jt in &starts[a + 1..] {
                let kt = tree.layer_of_interval(jt);
                for i2 in i..=i + (kt - ks) {
                    let r = (inv.as_matrix() * eta.values().get(jt, i2).as_matrix()).norm();
                    if r > best.0 {
                        best = (
                            r,
                            Some(Location {
                                interval: js,
                                node: i,
                            }),
                        );
                    }
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;

    use super::*;
    use crate::coeffmodel::{ScenarioTree, TimeGrid};

    fn det(n: usize) -> ScenarioTree {
        ScenarioTree::build(TimeGrid::new(1.0, n).unwrap(), 0).unwrap()
    }

    #[test]
    fn a0_identity_eta() {
        let c = CoefficientSet::builder(det(4), 1)
            .delta(1.0)
            .build()
            .unwrap();
        let r = validate(&c, None);
        let a0 = r.get("A0").unwrap();
        assert!(a0.passed());
        assert_eq!(a0.witness, 0.0);
        assert!(r.passes("C0"));
        assert_eq!(r.get("D0").unwrap().status, CheckStatus::NotEvaluated);
    }

    #[test]
    fn a0_cross_term_fails() {
        let c = CoefficientSet::builder(det(4), 2)
            .phi_constant(DMatrix::identity(2, 2))
            .delta(0.01)
            .build()
            .unwrap();
        let a0 = validate(&c, None).get("A0").cloned().unwrap();
        assert!(!a0.passed());
        // eigenvalues of [[0, 1], [1, 0.99]]
        let expect = (0.99 - (0.99f64 * 0.99 + 4.0).sqrt()) / 2.0;
        assert!((a0.witness - expect).abs() < 1e-12);
    }

    #[test]
    fn a1_zero_drift() {
        let c = CoefficientSet::builder(det(4), 1)
            .k_bound(0.3)
            .build()
            .unwrap();
        let a1 = validate(&c, None).get("A1").cloned().unwrap();
        assert!(a1.passed());
        assert_eq!(a1.witness, 0.0);
    }

    #[test]
    fn c1_warning() {
        let rows = vec![
            vec![SymMatrix::scalar(1, 1e-4)],
            vec![SymMatrix::scalar(1, 1e4)],
        ];
        let eta =
            crate::coeffmodel::MatrixProcess::piecewise(crate::coeffmodel::NodeField::new(rows));
        let c = CoefficientSet::builder(det(2), 1).eta(eta).build().unwrap();
        let c1 = validate(&c, None).get("C1").cloned().unwrap();
        assert!(c1.passed());
        assert!(c1.warning.is_some());
    }
}
