mod common;

use common::{random_psd, random_symmetric, unit_grid};
use nalgebra::{DMatrix, SymmetricEigen};
use nngp_ldp::operator::{
    equiv_metrics, kernel_to_operator, powers_stormer_gap, powers_stormer_variant, psd_project, sqrt_op, KernelGrid,
    OperatorRep, Tolerances,
};
use nngp_ldp::rng::SeedSpec;
use proptest::prelude::*;

fn tol() -> Tolerances {
    Tolerances::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn norm_chain_on_symmetric_operators(n in 1usize..24, seed in any::<u64>()) {
        let g = unit_grid(n);
        let k = OperatorRep::from_sym(g, random_symmetric(n, SeedSpec::new(seed))).unwrap();
        prop_assert!(k.op_norm() <= k.hs_norm());
        prop_assert!(k.hs_norm() <= k.trace_norm());
    }

    #[test]
    fn trace_norm_is_trace_for_psd(n in 1usize..24, rank in 1usize..8, seed in any::<u64>()) {
        let k = random_psd(&unit_grid(n), rank, 1.0, SeedSpec::new(seed));
        prop_assert!((k.trace_norm() - k.trace()).abs() <= 1e-12 * k.trace().abs().max(1e-300));
    }

    #[test]
    fn mercer_trace_matches_diagonal_quadrature(n in 1usize..24, freq in 0.1f64..6.0) {
        let g = unit_grid(n);
        let kern = KernelGrid::from_fn(g.clone(), |x, y| (-(x[0] - y[0]).powi(2) * freq).exp() + x[0] * y[0]);
        let op = kernel_to_operator(&kern, &tol()).unwrap();
        let diag: f64 = (0..n).map(|i| g.weights()[i] * kern.values[(i, i)]).sum();
        prop_assert!((op.trace() - diag).abs() <= 1e-12 * diag);
    }

    #[test]
    fn powers_stormer_holds(n in 1usize..20, r1 in 1usize..6, r2 in 1usize..6, seed in any::<u64>()) {
        let g = unit_grid(n);
        let s = SeedSpec::new(seed);
        let a = random_psd(&g, r1, 1.0, s.derive(0));
        let b = random_psd(&g, r2, 2.0, s.derive(1));
        let ps = powers_stormer_gap(&a, &b, &tol()).unwrap();
        prop_assert!(ps.lhs <= ps.rhs + 1e-10, "{:?}", ps);
        let v = powers_stormer_variant(&a, &b, &tol()).unwrap();
        prop_assert!(v.lhs <= v.rhs + 1e-10, "{:?}", v);
    }

    #[test]
    fn sqrt_reconstructs(n in 1usize..24, rank in 1usize..24, seed in any::<u64>()) {
        let k = random_psd(&unit_grid(n), rank, 3.0, SeedSpec::new(seed));
        let r = sqrt_op(&k, &tol()).unwrap();
        let back = r.sym() * r.sym();
        let err = OperatorRep::from_sym(k.grid().clone(), back).unwrap().try_sub(&k).unwrap().hs_norm();
        prop_assert!(err <= 1e-8 * (1.0 + k.hs_norm()), "err {err}");
    }

    #[test]
    fn projection_matches_clipping_oracle(n in 1usize..16, seed in any::<u64>()) {
        let g = unit_grid(n);
        let m = random_symmetric(n, SeedSpec::new(seed));
        let p = psd_project(g.clone(), &m, &tol()).unwrap();
        let eig = SymmetricEigen::new(m.clone());
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        let oracle = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        prop_assert!((p.sym() - &oracle).norm() <= 1e-10 * (1.0 + m.norm()));
        prop_assert!(p.min_eigenvalue() >= -1e-10);
        let again = psd_project(g, p.sym(), &tol()).unwrap();
        prop_assert!((again.sym() - p.sym()).norm() <= 1e-12 * (1.0 + p.sym().norm()));
    }

    #[test]
    fn equivalent_metrics_vanish_together(n in 2usize..16, seed in any::<u64>(), eps in 1e-8f64..1e-1) {
        let g = unit_grid(n);
        let s = SeedSpec::new(seed);
        let k = random_psd(&g, n, 1.0, s.derive(0));
        let kn = k.try_add(&random_psd(&g, 2, eps, s.derive(1))).unwrap();
        let m = equiv_metrics(&kn, &k, &tol()).unwrap();
        prop_assert!(m.d_hs <= m.d_tr + 1e-14);
        prop_assert!(m.d_sqrt_hs.powi(2) <= m.d_tr + 1e-10);
        // a PSD perturbation: trace-norm distance equals the trace gap
        prop_assert!((m.d_tr - m.d_trace_gap).abs() <= 1e-10 * (1.0 + m.d_tr));
    }
}

#[test]
fn indefinite_kernel_is_an_error_not_a_fix() {
    let g = unit_grid(3);
    let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1e-3, 0.5]));
    let err = OperatorRep::from_sym(g, m).unwrap().check_psd(&tol());
    assert!(matches!(err, Err(nngp_ldp::Error::NotPsd { .. })));
}
