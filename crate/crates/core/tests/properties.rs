use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use singular_lq::coeffmodel::{
    make_umi_eta, umi_check, validate, CoefficientSet, MartingaleSpec, ScenarioTree, TimeGrid,
    UmiGenerator,
};
use singular_lq::matcore::{
    kernel_projection, matrix_harmonic_check, monotone_limit, psd_order, psd_project, truncate,
    SymMatrix,
};

fn sym(d: usize) -> impl Strategy<Value = SymMatrix> {
    prop::collection::vec(-5.0..5.0f64, d * d)
        .prop_map(move |v| SymMatrix::symmetrize(&DMatrix::from_vec(d, d, v)))
}

fn any_sym() -> impl Strategy<Value = SymMatrix> {
    (1usize..=4).prop_flat_map(sym)
}

fn sym_pair() -> impl Strategy<Value = (SymMatrix, SymMatrix)> {
    (1usize..=4).prop_flat_map(|d| (sym(d), sym(d)))
}

fn pd(d: usize) -> impl Strategy<Value = SymMatrix> {
    (prop::collection::vec(-2.0..2.0f64, d * d), 0.1..2.0f64).prop_map(move |(v, shift)| {
        let b = DMatrix::from_vec(d, d, v);
        let m = &b * b.transpose() + DMatrix::identity(d, d) * shift;
        SymMatrix::symmetrize(&m)
    })
}

fn vectors() -> impl Strategy<Value = (usize, Vec<DVector<f64>>)> {
    (1usize..=5).prop_flat_map(|d| {
        let v = prop::collection::vec(-3.0..3.0f64, d).prop_map(DVector::from_vec);
        (Just(d), prop::collection::vec(v, 0..=d + 1))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn truncate_is_bounded_and_monotone_in_level(
        f in any_sym(), a in 0.01..10.0f64, b in 0.01..10.0f64,
    ) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let t_lo = truncate(&f, lo);
        let t_hi = truncate(&f, hi);
        prop_assert!(t_lo.max_abs() <= lo);
        prop_assert!(t_hi.max_abs() <= hi);
        prop_assert!(t_lo.max_abs() <= t_hi.max_abs() + 1e-15);
        if f.max_abs() <= lo {
            prop_assert_eq!(&t_lo, &f);
        }
        // a positive rescaling of f
        let s = t_hi.max_abs() / f.max_abs().max(f64::MIN_POSITIVE);
        prop_assert!((&t_hi - &f.scale(s)).max_abs() <= 1e-14 * f.max_abs().max(1.0));
    }

    #[test]
    fn kernel_projection_properties((d, vs) in vectors()) {
        let p = kernel_projection(d, &vs).unwrap();
        let pm = p.as_matrix();
        prop_assert!((pm * pm - pm).amax() < 1e-12);
        for v in &vs {
            prop_assert!((pm * v).norm() < 1e-10 * v.norm().max(1.0));
        }
        // any combination of the inputs is annihilated too
        if vs.len() >= 2 {
            let comb = &vs[0] * 0.7 - &vs[1] * 1.3;
            prop_assert!((pm * &comb).norm() < 1e-10 * comb.norm().max(1.0));
        }
        let mut scaled: Vec<DVector<f64>> = vs.iter().map(|v| v * -2.5).collect();
        scaled.reverse();
        let q = kernel_projection(d, &scaled).unwrap();
        prop_assert!((&q - &p).max_abs() < 1e-10);
        let ev = p.eigenvalues();
        prop_assert!(ev.iter().all(|l| l.abs() < 1e-10 || (l - 1.0).abs() < 1e-10));
    }

    #[test]
    fn harmonic_gap_is_psd(
        (xs, ws) in (1usize..=3).prop_flat_map(|d| (
            prop::collection::vec(pd(d), 1..=4),
            prop::collection::vec(0.05..1.0f64, 4),
        )),
    ) {
        let total: f64 = ws[..xs.len()].iter().sum();
        let n = xs.len();
        let mut probs: Vec<f64> = ws[..n].iter().map(|w| w / total).collect();
        probs[n - 1] = 1.0 - probs[..n - 1].iter().sum::<f64>();
        let samples: Vec<(SymMatrix, f64)> = xs.into_iter().zip(probs).collect();
        let report = matrix_harmonic_check(&samples, 1e-9).unwrap();
        prop_assert!(report.is_psd, "min eigenvalue {}", report.min_eigenvalue);
    }

    #[test]
    fn psd_projection_is_idempotent_and_nonexpansive((a, b) in sym_pair()) {
        let pa = psd_project(&a, 1e-12).matrix;
        let pb = psd_project(&b, 1e-12).matrix;
        prop_assert!(pa.min_eigenvalue() >= -1e-12 * a.norm().max(1.0));
        let again = psd_project(&pa, 1e-12).matrix;
        prop_assert!((&again - &pa).norm() <= 1e-12 * a.norm().max(1.0));
        prop_assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-12 * (a.norm() + b.norm()).max(1.0));
        prop_assert!(psd_order(&pa, &a, 1e-12 * a.norm().max(1.0)).unwrap());
    }

    #[test]
    fn monotone_sequences_converge((d, incs) in (1usize..=3).prop_flat_map(|d| {
        (Just(d), prop::collection::vec(pd(d), 1..=6))
    })) {
        let mut acc = SymMatrix::zeros(d);
        let mut seq = vec![acc.clone()];
        for inc in &incs {
            acc = &acc + inc;
            seq.push(acc.clone());
        }
        let lim = monotone_limit(&seq, 1e-12).unwrap();
        prop_assert_eq!(&lim.limit, &acc);
        prop_assert!((lim.cauchy - incs.last().unwrap().norm()).abs() < 1e-10 * acc.norm().max(1.0));
        seq.reverse();
        prop_assert!(monotone_limit(&seq, 1e-12).is_err());
    }

    #[test]
    fn tree_weights_sum_to_one(depth in 0usize..=12, mult in 1usize..=4) {
        let tree = ScenarioTree::build(TimeGrid::new(1.0, depth.max(1) * mult).unwrap(), depth).unwrap();
        let leaf: f64 = tree.leaf_weights().iter().sum();
        prop_assert!((leaf - 1.0).abs() < 1e-14);
        prop_assert_eq!(tree.leaf_weights().len(), tree.leaf_count());
        for j in 0..=tree.steps() {
            let w = tree.point_weights(j);
            prop_assert_eq!(w.len(), tree.nodes_at_point(j));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
        // the transition kernel carries layer weights forward
        for k in 0..depth {
            let here = tree.layer_weights(k);
            let next = tree.layer_weights(k + 1);
            for (to, target) in next.iter().enumerate() {
                let pushed: f64 = here.iter().enumerate().map(|(i, p)| p * tree.transition(1, i, to)).sum();
                prop_assert!((pushed - target).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn multiplicative_martingale_passes_umi(
        depth in 1usize..=6, up in 0.2..1.8f64, d in 1usize..=3, eta0 in 0.2..3.0f64,
    ) {
        let tree = ScenarioTree::build(TimeGrid::new(1.0, depth * 3).unwrap(), depth).unwrap();
        let out = make_umi_eta(&tree, &UmiGenerator::Martingale(MartingaleSpec::Multiplicative {
            eta0: SymMatrix::scalar(d, eta0),
            up,
            down: 2.0 - up,
        })).unwrap();
        let check = umi_check(&out.eta, &tree);
        prop_assert!(check.pass, "deviation {}", check.worst_deviation);
        prop_assert!(out.stopped.iter().all(|(_, _, s)| !*s));
    }

    #[test]
    fn stopped_martingale_respects_floor(
        depth in 1usize..=6, up in 1.05..1.6f64, delta in 0.2..0.95f64,
    ) {
        let tree = ScenarioTree::build(TimeGrid::new(1.0, depth * 2).unwrap(), depth).unwrap();
        let out = make_umi_eta(&tree, &UmiGenerator::StoppedMartingale {
            base: MartingaleSpec::Multiplicative {
                eta0: SymMatrix::identity(2),
                up,
                down: 2.0 - up,
            },
            delta,
        }).unwrap();
        let values = out.eta.values();
        for (_, _, m) in values.iter() {
            prop_assert!(m.min_eigenvalue() >= delta - 1e-12);
        }
        // parent is the mean of its children wherever neither child was floored
        for k in 0..depth.saturating_sub(1) {
            let (a, b) = (tree.layer_start(k), tree.layer_start(k + 1));
            for i in 0..=k {
                if *out.stopped.get(b, i) || *out.stopped.get(b, i + 1) {
                    continue;
                }
                let mean = (values.get(b, i) + values.get(b, i + 1)).scale(0.5);
                prop_assert!((&mean - values.get(a, i)).max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn a0_is_monotone_in_delta(
        eta in 0.1..3.0f64, lambda in 0.0..2.0f64, phi in -2.0..2.0f64,
        a in 0.001..2.0f64, b in 0.001..2.0f64,
    ) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let c = CoefficientSet::builder(ScenarioTree::deterministic(TimeGrid::new(1.0, 4).unwrap()), 1)
            .eta_constant(SymMatrix::scalar(1, eta))
            .lambda_constant(SymMatrix::scalar(1, lambda))
            .phi_constant(DMatrix::from_element(1, 1, phi))
            .build()
            .unwrap();
        let pass_hi = validate(&c.clone().with_delta(hi), None).passes("A0");
        let pass_lo = validate(&c.with_delta(lo), None).passes("A0");
        prop_assert!(!pass_hi || pass_lo);
    }
}
