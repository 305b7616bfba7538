use nalgebra::DMatrix;
use serde::Serialize;

use super::coeffs::MatrixProcess;
use super::tree::{NodeField, ScenarioTree};
use super::ModelError;
use crate::matcore::SymMatrix;
use crate::quad::expm;

/// Tree martingale for `η`, evaluated per layer and node.
#[derive(Debug, Clone, PartialEq)]
pub enum MartingaleSpec {
    /// `η_{k,i} = up^i down^(k−i) η₀`, with `up + down = 2`.
    Multiplicative { eta0: SymMatrix, up: f64, down: f64 },
    /// `η_{k,i} = η₀ + (2i − k) sqrt(Δ) S`.
    Additive { eta0: SymMatrix, vol: SymMatrix },
}

impl MartingaleSpec {
    pub fn dim(&self) -> usize {
        match self {
            MartingaleSpec::Multiplicative { eta0, .. } | MartingaleSpec::Additive { eta0, .. } => {
                eta0.dim()
            }
        }
    }

    fn check(&self) -> Result<(), ModelError> {
        match self {
            MartingaleSpec::Multiplicative { up, down, .. } => {
                if !(*up > 0.0 && *down > 0.0) {
                    return Err(ModelError::InvalidGenerator(format!(
                        "factors must be positive, got ({up}, {down})"
                    )));
                }
                if (up + down - 2.0).abs() > 1e-12 {
                    return Err(ModelError::InvalidGenerator(format!(
                        "factors must average to 1 for a martingale, got ({up}, {down})"
                    )));
                }
            }
            MartingaleSpec::Additive { eta0, vol } => {
                if eta0.dim() != vol.dim() {
                    return Err(ModelError::Dimension {
                        field: "vol",
                        expected: eta0.dim(),
                        found: vol.dim(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, tree: &ScenarioTree, k: usize, i: usize) -> SymMatrix {
        match self {
            MartingaleSpec::Multiplicative { eta0, up, down } => {
                eta0.scale(up.powi(i as i32) * down.powi((k - i) as i32))
            }
            MartingaleSpec::Additive { eta0, vol } => eta0 + &vol.scale(tree.brownian_value(k, i)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UmiGenerator {
    Martingale(MartingaleSpec),
    /// `η_t = M_t G(t)` with `dG = G g dt`, `G(0) = Id`; `g` is given per
    /// interval (or once for all intervals).
    MultiplicativeDrift {
        base: MartingaleSpec,
        g: Vec<DMatrix<f64>>,
    },
    /// Martingale with eigenvalues floored at `delta` on every node whose
    /// smallest eigenvalue drops to `delta` or below.
    StoppedMartingale {
        base: MartingaleSpec,
        delta: f64,
    },
}

/// Generated `η` together with the nodes the stopping rule touched.
#[derive(Debug, Clone)]
pub struct UmiEta {
    pub eta: MatrixProcess,
    pub stopped: NodeField<bool>,
    /// `G(t_j)` at every grid point (identity without drift).
    pub g_path: Vec<DMatrix<f64>>,
}

pub fn make_umi_eta(tree: &ScenarioTree, generator: &UmiGenerator) -> Result<UmiEta, ModelError> {
    let n = tree.steps();
    let dt = tree.grid().dt();
    let (base, growth, floor) = match generator {
        UmiGenerator::Martingale(b) => (b, None, None),
        UmiGenerator::MultiplicativeDrift { base, g } => {
            if g.len() != 1 && g.len() != n {
                return Err(ModelError::FieldLength {
                    field: "g",
                    expected: n,
                    found: g.len(),
                });
            }
            for m in g {
                if m.nrows() != base.dim() || m.ncols() != base.dim() {
                    return Err(ModelError::Dimension {
                        field: "g",
                        expected: base.dim(),
                        found: m.nrows(),
                    });
                }
            }
            let full: Vec<DMatrix<f64>> = (0..n)
                .map(|j| g[if g.len() == 1 { 0 } else { j }].clone())
                .collect();
            (base, Some(full), None)
        }
        UmiGenerator::StoppedMartingale { base, delta } => {
            if !(*delta > 0.0) {
                return Err(ModelError::InvalidGenerator(format!(
                    "stopping level must be positive, got {delta}"
                )));
            }
            (base, None, Some(*delta))
        }
    };
    base.check()?;
    let d = base.dim();

    let mut g_path = vec![DMatrix::identity(d, d)];
    if let Some(g) = &growth {
        for gj in g {
            let next = g_path.last().unwrap() * expm(&(gj * dt));
            g_path.push(next);
        }
    } else {
        g_path.resize(n + 1, DMatrix::identity(d, d));
    }

    let mut rows = Vec::with_capacity(n);
    let mut stopped_rows = Vec::with_capacity(n);
    for j in 0..n {
        let k = tree.layer_of_interval(j);
        let mut row = Vec::with_capacity(k + 1);
        let mut srow = Vec::with_capacity(k + 1);
        for i in 0..=k {
            let m = base.value(tree, k, i);
            let (m, hit) = match floor {
                Some(level) if m.min_eigenvalue() <= level => (floor_eigenvalues(&m, level), true),
                _ => (m, false),
            };
            let v = if growth.is_some() {
                let raw = m.as_matrix() * &g_path[j];
                let asym = (&raw - raw.transpose()).norm();
                if asym > 1e-12 * raw.norm().max(1.0) {
                    return Err(ModelError::AsymmetricEta {
                        interval: j,
                        node: i,
                    });
                }
                SymMatrix::symmetrize(&raw)
            } else {
                m
            };
            let min_eigenvalue = v.min_eigenvalue();
            if !(min_eigenvalue > 0.0) {
                return Err(ModelError::NotPositiveDefinite {
                    field: "eta",
                    interval: j,
                    node: i,
                    min_eigenvalue,
                });
            }
            row.push(v);
            srow.push(hit);
        }
        rows.push(row);
        stopped_rows.push(srow);
    }
    let values = NodeField::new(rows);
    let eta = match growth {
        Some(g) => MatrixProcess::with_growth(values, g)?,
        None => MatrixProcess::piecewise(values),
    };
    Ok(UmiEta {
        eta,
        stopped: NodeField::new(stopped_rows),
        g_path,
    })
}

fn floor_eigenvalues(m: &SymMatrix, level: f64) -> SymMatrix {
    let eig = m.eigen();
    let v = &eig.eigenvectors;
    let l = eig.eigenvalues.map(|x| x.max(level));
    SymMatrix::symmetrize(&(v * DMatrix::from_diagonal(&l) * v.transpose()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UmiCheck {
    pub pass: bool,
    pub worst_deviation: f64,
}

pub const UMI_TOL: f64 = 1e-10;

/// Compares `E[η_s⁻¹ η_t | F_s]` with `E[η_s⁻¹ η_t]` by exact tree sums.
///
/// `s` and `t` range over the first and last interval of every layer, so
/// both the across-layer and the within-layer increments are covered.
pub fn umi_check(eta: &MatrixProcess, tree: &ScenarioTree) -> UmiCheck {
    let n = tree.steps();
    let mut checkpoints: Vec<usize> = Vec::new();
    for k in 0..tree.interval_layers() {
        let first = tree.layer_start(k);
        let last = (first + tree.stride()).min(n) - 1;
        checkpoints.push(first);
        if last != first {
            checkpoints.push(last);
        }
    }
    let d = eta.values().row(0)[0].dim();
    let mut worst = 0.0_f64;
    for (a, &js) in checkpoints.iter().enumerate() {
        let ks = tree.layer_of_interval(js);
        let ws = tree.layer_weights(ks);
        let inv: Vec<DMatrix<f64>> = (0..=ks)
            .map(|i| {
                eta.values()
                    .get(js, i)
                    .inverse()
                    .expect("eta positive definite")
                    .into_matrix()
            })
            .collect();
        for &jt in &checkpoints[a + 1..] {
            let kt = tree.layer_of_interval(jt);
            let m = kt - ks;
            let probs = tree.layer_weights(m);
            let cond: Vec<DMatrix<f64>> = (0..=ks)
                .map(|i| {
                    let mut acc = DMatrix::zeros(d, d);
                    for (step, p) in probs.iter().enumerate() {
                        acc += eta.values().get(jt, i + step).as_matrix() * *p;
                    }
                    &inv[i] * acc
                })
                .collect();
            let mut uncond = DMatrix::zeros(d, d);
            for (c, w) in cond.iter().zip(&ws) {
                uncond += c * *w;
            }
            for c in &cond {
                worst = worst.max((c - &uncond).norm());
            }
        }
    }
    UmiCheck {
        pass: worst <= UMI_TOL,
        worst_deviation: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffmodel::TimeGrid;

    fn tree(n: usize, depth: usize) -> ScenarioTree {
        ScenarioTree::build(TimeGrid::new(1.0, n).unwrap(), depth).unwrap()
    }

    fn scalar_mult(up: f64, down: f64) -> MartingaleSpec {
        MartingaleSpec::Multiplicative {
            eta0: SymMatrix::scalar(1, 1.0),
            up,
            down,
        }
    }

    #[test]
    fn martingale_layer_values() {
        let t = tree(4, 2);
        let out = make_umi_eta(&t, &UmiGenerator::Martingale(scalar_mult(1.2, 0.8))).unwrap();
        let layer1: Vec<f64> = out
            .eta
            .values()
            .row(2)
            .iter()
            .map(|m| m.get(0, 0))
            .collect();
        assert!((layer1[0] - 0.8).abs() < 1e-15 && (layer1[1] - 1.2).abs() < 1e-15);
        assert!(umi_check(&out.eta, &t).pass);
    }

    #[test]
    fn stopped_martingale_floor() {
        let t = tree(3, 3);
        let out = make_umi_eta(
            &t,
            &UmiGenerator::StoppedMartingale {
                base: scalar_mult(1.2, 0.8),
                delta: 0.9,
            },
        )
        .unwrap();
        for (j, i, m) in out.eta.values().iter() {
            assert!(m.get(0, 0) >= 0.9 - 1e-15);
            assert_eq!(*out.stopped.get(j, i), m.get(0, 0) == 0.9);
        }
        assert!(*out.stopped.get(1, 0));
        assert!(!*out.stopped.get(1, 1));
        assert!(!*out.stopped.get(0, 0));
    }

    #[test]
    fn zero_drift_is_martingale_case() {
        let t = tree(4, 2);
        let plain = make_umi_eta(&t, &UmiGenerator::Martingale(scalar_mult(1.1, 0.9))).unwrap();
        let drift = make_umi_eta(
            &t,
            &UmiGenerator::MultiplicativeDrift {
                base: scalar_mult(1.1, 0.9),
                g: vec![DMatrix::zeros(1, 1)],
            },
        )
        .unwrap();
        assert_eq!(plain.eta, drift.eta);
    }

    #[test]
    fn drift_passes_umi() {
        let t = tree(8, 4);
        let g = DMatrix::from_element(1, 1, 0.3);
        let out = make_umi_eta(
            &t,
            &UmiGenerator::MultiplicativeDrift {
                base: scalar_mult(1.1, 0.9),
                g: vec![g],
            },
        )
        .unwrap();
        assert!((out.g_path[8][(0, 0)] - 0.3f64.exp()).abs() < 1e-13);
        assert!(umi_check(&out.eta, &t).pass);
    }

    #[test]
    fn deterministic_passes() {
        let t = tree(6, 0);
        let rows = (0..6)
            .map(|j| vec![SymMatrix::scalar(1, 1.0 + j as f64)])
            .collect();
        let c = umi_check(&MatrixProcess::piecewise(NodeField::new(rows)), &t);
        assert!(c.pass);
        assert_eq!(c.worst_deviation, 0.0);
    }

    #[test]
    fn kinked_tree_fails() {
        // layer 1 values (1, 3) are a martingale around 2 but the root is 1
        let t = tree(2, 2);
        let rows = vec![
            vec![SymMatrix::scalar(1, 1.0)],
            vec![SymMatrix::scalar(1, 1.0), SymMatrix::scalar(1, 3.0)],
        ];
        let c = umi_check(&MatrixProcess::piecewise(NodeField::new(rows)), &t);
        assert!(c.pass, "a single transition is always uncorrelated");

        let t = tree(3, 3);
        let rows = vec![
            vec![SymMatrix::scalar(1, 1.0)],
            vec![SymMatrix::scalar(1, 1.0), SymMatrix::scalar(1, 2.0)],
            vec![
                SymMatrix::scalar(1, 1.0),
                SymMatrix::scalar(1, 1.0),
                SymMatrix::scalar(1, 5.0),
            ],
        ];
        // from node 0: E[η_2]/η_1 = 1, from node 1: (1 + 5)/2 / 2 = 1.5
        let c = umi_check(&MatrixProcess::piecewise(NodeField::new(rows)), &t);
        assert!(!c.pass);
        assert!((c.worst_deviation - 0.25).abs() < 1e-14);
    }

    #[test]
    fn generator_errors() {
        let t = tree(2, 2);
        assert!(make_umi_eta(&t, &UmiGenerator::Martingale(scalar_mult(1.5, 0.6))).is_err());
        let add = MartingaleSpec::Additive {
            eta0: SymMatrix::scalar(1, 0.1),
            vol: SymMatrix::scalar(1, 1.0),
        };
        assert!(matches!(
            make_umi_eta(&t, &UmiGenerator::Martingale(add)),
            Err(ModelError::NotPositiveDefinite { .. })
        ));
    }
}
