use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use singular_lq::closedform::{
    asymptotic_decompose, reduce, solve_expansion, umi_control, umi_value, ClosedFormError,
};
use singular_lq::coeffmodel::{
    make_umi_eta, CoefficientSet, CoefficientSource, ItoEtaSpec, MartingaleSpec, MatrixProcess,
    NodeField, ScenarioTree, TimeGrid, UmiGenerator,
};
use singular_lq::control::evaluate_cost;
use singular_lq::matcore::SymMatrix;
use singular_lq::riccati::{
    penalized_ladder, singular_limit, solve_ode, LadderOptions, OdeSettings, SolverKind,
};

fn det(horizon: f64, n: usize) -> ScenarioTree {
    ScenarioTree::deterministic(TimeGrid::new(horizon, n).unwrap())
}

fn scalar(v: f64) -> SymMatrix {
    SymMatrix::scalar(1, v)
}

#[test]
fn umi_identity_eta() {
    let tree = det(1.0, 40);
    let eta = MatrixProcess::constant(40, SymMatrix::identity(2));
    let sol = umi_value(&eta, &tree).unwrap();
    for p in 0..40 {
        let r = 1.0 - p as f64 / 40.0;
        assert!((sol.y_at(p, 0) - &SymMatrix::scalar(2, 1.0 / r)).norm() < 1e-12);
        assert!((sol.h_path[p].get(0, 0) - r).abs() < 1e-13);
    }
    assert_eq!(sol.h_path[40].norm(), 0.0);

    let x = DVector::from_vec(vec![1.0, -2.0]);
    let s = umi_control(&sol, 0, &x).unwrap();
    for p in 0..=40 {
        let r = 1.0 - p as f64 / 40.0;
        assert!((s.x_path.get(p, 0) - &x * r).norm() < 1e-12);
    }
    assert!((s.u_path.get(7, 0) - &x).norm() < 1e-12);
    assert!((s.realized_cost - 5.0).abs() < 1e-12);
    let zero = umi_control(&sol, 0, &DVector::zeros(2)).unwrap();
    assert_eq!(zero.realized_cost, 0.0);
    assert!(matches!(
        umi_control(&sol, 40, &x),
        Err(ClosedFormError::AtHorizon)
    ));
}

#[test]
fn umi_diagonal_rates() {
    let tree = det(2.0, 20);
    let eta = MatrixProcess::constant(20, SymMatrix::from_diagonal(&[1.0, 3.0]));
    let sol = umi_value(&eta, &tree).unwrap();
    let x = DVector::from_vec(vec![2.0, 1.0]);
    let s = umi_control(&sol, 0, &x).unwrap();
    assert!((s.u_path.get(3, 0) - &x / 2.0).norm() < 1e-12);
    assert!((s.realized_cost - (4.0 / 2.0 + 3.0 / 2.0)).abs() < 1e-12);
}

#[test]
fn umi_martingale_tree() {
    let tree = ScenarioTree::build(TimeGrid::new(1.0, 64).unwrap(), 8).unwrap();
    let gen = UmiGenerator::Martingale(MartingaleSpec::Multiplicative {
        eta0: scalar(1.0),
        up: 1.3,
        down: 0.7,
    });
    let eta = make_umi_eta(&tree, &gen).unwrap().eta;
    let sol = umi_value(&eta, &tree).unwrap();
    assert!(sol.dual_gap <= 1e-10);
    for p in 0..64 {
        let r = 1.0 - p as f64 / 64.0;
        for i in 0..tree.nodes_at_interval(p) {
            let e = eta.values().get(p, i).get(0, 0) / r;
            assert!((sol.y_at(p, i).get(0, 0) - e).abs() <= 1e-10 * e.max(1.0));
        }
    }
    let c = CoefficientSet::builder(tree, 1).eta(eta).build().unwrap();
    let x = DVector::from_element(1, 1.0);
    let s = umi_control(&sol, 0, &x).unwrap();
    let e = evaluate_cost(&s, &c, &[scalar(0.0)]).unwrap();
    assert!((e.total() - s.realized_cost).abs() < 1e-12);
    assert!((s.realized_cost - 1.0).abs() < 1e-12);
}

#[test]
fn umi_rejects_kinked_eta() {
    let tree = ScenarioTree::build(TimeGrid::new(1.0, 3).unwrap(), 3).unwrap();
    let rows = vec![
        vec![scalar(1.0)],
        vec![scalar(1.0), scalar(2.0)],
        vec![scalar(1.0), scalar(1.0), scalar(5.0)],
    ];
    let eta = MatrixProcess::piecewise(NodeField::new(rows));
    assert!(matches!(
        umi_value(&eta, &tree),
        Err(ClosedFormError::NotUmi { .. })
    ));
}

fn drift_case(n: usize, g: f64) -> (CoefficientSet, ItoEtaSpec) {
    let tree = det(1.0, n);
    let gen = UmiGenerator::MultiplicativeDrift {
        base: MartingaleSpec::Multiplicative {
            eta0: scalar(1.0),
            up: 1.0,
            down: 1.0,
        },
        g: vec![DMatrix::from_element(1, 1, g)],
    };
    let eta = make_umi_eta(&tree, &gen).unwrap().eta;
    let ito = ItoEtaSpec::from_eta(&eta, &tree);
    (
        CoefficientSet::builder(tree, 1).eta(eta).build().unwrap(),
        ito,
    )
}

#[test]
fn umi_drift_formula() {
    let g = 0.7;
    let (c, _) = drift_case(50, g);
    let sol = umi_value(c.eta(), c.tree()).unwrap();
    for p in 0..50 {
        let t = p as f64 / 50.0;
        let r = 1.0 - t;
        // Y_t = η_t (∫_t^T G(s)⁻¹ G(t) ds)⁻¹
        let integral = (1.0 - (-g * r).exp()) / g;
        let expect = (g * t).exp() / integral;
        assert!((sol.y_at(p, 0).get(0, 0) - expect).abs() < 1e-10 * expect);
        assert!((sol.g_path.as_ref().unwrap()[p][(0, 0)] - (g * t).exp()).abs() < 1e-12);
    }
    let x = DVector::from_element(1, 1.0);
    let s = umi_control(&sol, 10, &x).unwrap();
    let exact = g / (1.0 - (-g * 0.8f64).exp()) * (0.2 * g).exp();
    assert!((s.realized_cost - exact).abs() < 1e-10 * exact);
    assert!(s.x_path.get(50, 0)[0].abs() < 1e-14);
    let quadrature = evaluate_cost(&s, &c, &[scalar(0.0)]).unwrap().total();
    assert!(
        (quadrature - exact).abs() < 1e-8 * exact,
        "{quadrature} vs {exact}"
    );
}

#[test]
fn reduce_identity_when_no_drift() {
    let c = CoefficientSet::builder(det(1.0, 20), 2)
        .eta_constant(SymMatrix::from_diagonal(&[1.0, 2.0]))
        .lambda_constant(SymMatrix::from_diagonal(&[0.5, 0.5]))
        .k_bound(3.0)
        .build()
        .unwrap();
    let ito = ItoEtaSpec::zero(20, 2).with_bound(1.0);
    let r = reduce(&c, &ito, &OdeSettings::default()).unwrap();
    assert!(r
        .u_path
        .iter()
        .all(|u| (u - DMatrix::identity(2, 2)).norm() == 0.0));
    assert_eq!(r.eta_tilde.get(3, 0), c.eta().values().get(3, 0));
    assert_eq!(r.lambda_tilde.get(3, 0), c.lambda().get(3, 0));
    assert_eq!(r.delta_1, 0.0);
}

#[test]
fn reduce_scalar_linear_drift() {
    let a = 0.4;
    let c = CoefficientSet::builder(det(1.0, 50), 1)
        .eta_constant(scalar(1.5))
        .a_constant(DMatrix::from_element(1, 1, a))
        .k_bound(1.5)
        .build()
        .unwrap();
    let ito = ItoEtaSpec::zero(50, 1).with_bound(2.0);
    let r = reduce(&c, &ito, &OdeSettings::default()).unwrap();
    for p in 0..=50 {
        let t = p as f64 / 50.0;
        assert!((r.u_path[p][(0, 0)] - (-a * t).exp()).abs() < 1e-13);
        if p < 50 {
            assert!((r.eta_tilde.get(p, 0).get(0, 0) - (2.0 * a * t).exp() * 1.5).abs() < 1e-12);
        }
    }
    assert!(r.round_trip_gap <= 1e-8);
}

#[test]
fn reduce_round_trip_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let d = 2;
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.5..0.5));
        let phi = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.3..0.3));
        let eta = SymMatrix::from_diagonal(&[rng.gen_range(1.0..2.0), rng.gen_range(1.0..2.0)]);
        let lambda = &SymMatrix::symmetrize(
            &(phi.transpose() * eta.inverse().unwrap().as_matrix() * &phi * 2.0),
        ) + &SymMatrix::scalar(d, 0.1);
        let c = CoefficientSet::builder(det(1.0, 40), d)
            .eta_constant(eta)
            .lambda_constant(lambda)
            .phi_constant(phi)
            .a_constant(a)
            .k_bound(3.0)
            .build()
            .unwrap();
        let ito = ItoEtaSpec::zero(40, d).with_bound(10.0);
        let r = reduce(&c, &ito, &OdeSettings::default()).unwrap();
        assert!(r.round_trip_gap <= 1e-8);
        for u in &r.u_path {
            assert!(u.singular_values().max() <= (r.delta_1).exp() + 1e-12);
        }
        assert!(r
            .lambda_tilde
            .iter()
            .all(|(_, _, l)| l.min_eigenvalue() >= -1e-12));
    }
}

#[test]
fn expansion_trivial_case() {
    let c = CoefficientSet::builder(det(1.0, 20), 2).build().unwrap();
    let ito = ItoEtaSpec::zero(20, 2);
    let e = solve_expansion(&c, &ito, &OdeSettings::default()).unwrap();
    assert!(e.h_field.iter().all(|(_, _, h)| h.norm() == 0.0));
    assert!(e.z_h_field.iter().all(|(_, _, z)| z.norm() == 0.0));
    assert_eq!(e.window_start, 0);
}

fn coth_expansion(n: usize) -> singular_lq::closedform::ExpansionSolution {
    let c = CoefficientSet::builder(det(1.0, n), 1)
        .lambda_constant(scalar(1.0))
        .build()
        .unwrap();
    solve_expansion(&c, &ItoEtaSpec::zero(n, 1), &OdeSettings::default()).unwrap()
}

#[test]
fn expansion_coth_case() {
    let e = coth_expansion(400);
    assert!(e.contraction_factor <= 0.501);
    assert!(e.window_start > 0);
    for p in 0..=400 {
        let r = 1.0 - p as f64 / 400.0;
        let exact = if r == 0.0 { 0.0 } else { r * r / r.tanh() - r };
        assert!(
            (e.h_field.get(p, 0).get(0, 0) - exact).abs() < 1e-6,
            "point {p}"
        );
    }
    let halved = coth_expansion(800);
    assert!((e.c_bound - halved.c_bound).abs() <= 0.1 * halved.c_bound);
    assert!((e.c_bound - (1f64 / 1f64.tanh() - 1.0)).abs() < 1e-6);
}

#[test]
fn expansion_drift_case() {
    let g = 0.5;
    let (c, ito) = drift_case(400, g);
    let e = solve_expansion(&c, &ito, &OdeSettings::default()).unwrap();
    for p in 0..400 {
        let t = p as f64 / 400.0;
        let r = 1.0 - t;
        let integral = (1.0 - (-g * r).exp()) / g;
        let h = -1.0 + r / integral;
        let exact = r * (g * t).exp() * h;
        assert!(
            (e.h_field.get(p, 0).get(0, 0) - exact).abs() < 1e-8,
            "point {p}"
        );
    }
}

#[test]
fn expansion_requires_reduced_coefficients() {
    let c = CoefficientSet::builder(det(1.0, 10), 1)
        .a_constant(DMatrix::from_element(1, 1, 0.1))
        .build()
        .unwrap();
    assert!(matches!(
        solve_expansion(&c, &ItoEtaSpec::zero(10, 1), &OdeSettings::default()),
        Err(ClosedFormError::NeedsReduction)
    ));
}

#[test]
fn decompose_linear_and_coth() {
    let c = CoefficientSet::builder(det(1.0, 100), 1).build().unwrap();
    let mut opts = LadderOptions::new(1.0);
    opts.epsilon = 0.1;
    opts.solver = SolverKind::Ode;
    let lim = singular_limit(
        &penalized_ladder(&c, &opts, &OdeSettings::default()).unwrap(),
        0.1,
        1e-3,
    )
    .unwrap();
    let dec = asymptotic_decompose(&lim, c.eta(), None);
    assert!(dec.h_field.iter().all(|(_, _, h)| h.norm() < 1e-3));

    let c = CoefficientSet::builder(det(1.0, 400), 1)
        .lambda_constant(scalar(1.0))
        .build()
        .unwrap();
    // the ladder gap in H is about 1/n, in Y about 1/(n (T − t)²)
    opts.ladder_tol = 2e-6;
    opts.schedule = singular_lq::riccati::default_schedule(26);
    let lim = singular_limit(
        &penalized_ladder(&c, &opts, &OdeSettings::default()).unwrap(),
        0.1,
        2e-6,
    )
    .unwrap();
    let e = coth_expansion(400);
    let dec = asymptotic_decompose(&lim, c.eta(), Some(&e));
    assert!(dec.c_estimate <= 1.0 / 3.0 + 1e-3);
    assert!(dec.discrepancy.unwrap() <= 1e-6, "{:?}", dec.discrepancy);
}

#[test]
fn decompose_martingale_tree() {
    let tree = ScenarioTree::build(TimeGrid::new(1.0, 64).unwrap(), 4).unwrap();
    let gen = UmiGenerator::Martingale(MartingaleSpec::Multiplicative {
        eta0: scalar(1.0),
        up: 1.2,
        down: 0.8,
    });
    let eta = make_umi_eta(&tree, &gen).unwrap().eta;
    let c = CoefficientSet::builder(tree, 1)
        .eta(eta.clone())
        .build()
        .unwrap();
    let mut opts = LadderOptions::new(1.0);
    opts.epsilon = 0.1;
    let lim = singular_limit(
        &penalized_ladder(&c, &opts, &OdeSettings::default()).unwrap(),
        0.1,
        1e-3,
    )
    .unwrap();
    let dec = asymptotic_decompose(&lim, &eta, None);
    assert!(dec.h_field.iter().all(|(_, _, h)| h.norm() < 2e-3));
    let solo = solve_ode(
        &CoefficientSet::builder(det(1.0, 64), 1).build().unwrap(),
        &scalar(1.0),
        &OdeSettings::default(),
    );
    assert!(solo.is_ok());
}
