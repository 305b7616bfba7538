//! Small quadrature and matrix-exponential helpers shared by the solvers.

use nalgebra::DMatrix;

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Five-point Gauss–Legendre nodes and weights mapped to `[a, b]`.
pub fn gauss_legendre5(a: f64, b: f64) -> [(f64, f64); 5] {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut out = [(0.0, 0.0); 5];
    for k in 0..5 {
        out[k] = (mid + half * GL5_NODES[k], half * GL5_WEIGHTS[k]);
    }
    out
}

/// `exp(m)` for a square matrix.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.iter().all(|x| *x == 0.0) {
        return DMatrix::identity(m.nrows(), m.ncols());
    }
    m.clone().exp()
}

/// `∫_0^len exp(-g u) du`, read off the exponential of `[[-g, I], [0, 0]] len`.
pub fn exp_integral(g: &DMatrix<f64>, len: f64) -> DMatrix<f64> {
    let d = g.nrows();
    if g.iter().all(|x| *x == 0.0) {
        return DMatrix::identity(d, d) * len;
    }
    let mut aug = DMatrix::zeros(2 * d, 2 * d);
    aug.view_mut((0, 0), (d, d)).copy_from(&(-g * len));
    aug.view_mut((0, d), (d, d))
        .copy_from(&(DMatrix::identity(d, d) * len));
    aug.exp().view((0, d), (d, d)).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gl5_is_exact_for_degree_nine() {
        let s: f64 = gauss_legendre5(0.0, 2.0)
            .iter()
            .map(|(x, w)| w * x.powi(9))
            .sum();
        assert!((s - 2f64.powi(10) / 10.0).abs() < 1e-10);
    }

    #[test]
    fn exp_integral_scalar() {
        let g = DMatrix::from_element(1, 1, 0.7);
        let v = exp_integral(&g, 1.3)[(0, 0)];
        let exact = (1.0 - (-0.7f64 * 1.3).exp()) / 0.7;
        assert!((v - exact).abs() < 1e-14);
        assert_eq!(
            exp_integral(&DMatrix::zeros(2, 2), 0.5),
            DMatrix::identity(2, 2) * 0.5
        );
    }
}
