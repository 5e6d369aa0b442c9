mod common;

use std::sync::Arc;

use common::{kernel_with_diagonal, legendre_scan, random_psd, random_symmetric, unit_grid};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use nngp_ldp::field::ActivationSpec;
use nngp_ldp::nngp::{nngp_step, relu_arccos_kernel, NngpOptions};
use nngp_ldp::operator::{psd_project, Grid, OperatorRep, Tolerances};
use nngp_ldp::posterior::{psi, psi_mf};
use nngp_ldp::rate::{rate_eval, scalar_rate_closed_form, DualObjective, RateOptions};
use nngp_ldp::rng::SeedSpec;
use proptest::prelude::*;

fn point() -> Arc<Grid> {
    Arc::new(Grid::from_points(vec![vec![0.0]], 1.0).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn relu_quadrature_matches_arccos(n in 1usize..8, seed in any::<u64>(), lambda in 0.5f64..2.0, b in 0.0f64..1.0) {
        let k = kernel_with_diagonal(n, 1e-3, 10.0, SeedSpec::new(seed));
        let tol = Tolerances::default();
        let q = nngp_step(&k, lambda, b, &ActivationSpec::relu(), &NngpOptions::with_nodes(40), &tol).unwrap();
        let c = relu_arccos_kernel(&k, lambda, b);
        prop_assert!(q.kernel().sup_distance(&c.kernel()) <= 1e-6);
    }

    #[test]
    fn nngp_step_is_psd(n in 1usize..8, seed in any::<u64>()) {
        let k = kernel_with_diagonal(n, 1e-2, 4.0, SeedSpec::new(seed));
        let tol = Tolerances::default();
        for act in [ActivationSpec::relu(), ActivationSpec::tanh(), ActivationSpec::erf()] {
            let s = nngp_step(&k, 1.0, 0.1, &act, &NngpOptions::default(), &tol).unwrap();
            let p = psd_project(s.grid().clone(), s.sym(), &tol).unwrap();
            prop_assert!((p.sym() - s.sym()).amax() <= tol.psd_tol);
        }
    }

    #[test]
    fn psi_bounds(p in 1usize..6, seed in any::<u64>(), beta in 0.0f64..5.0) {
        let s = SeedSpec::new(seed);
        let a = common::gaussian_matrix(p, p, s);
        let sigma = &a * a.transpose();
        let y = DVector::from_iterator(p, common::gaussian_matrix(p, 1, s.derive(1)).iter().copied());
        let v = psi(&sigma, &y, beta).unwrap();
        let max_eig = SymmetricEigen::new(sigma.clone()).eigenvalues.max().max(0.0);
        let y2 = y.norm_squared();
        prop_assert!(v.total >= 0.0 && v.quad >= 0.0 && v.logdet >= 0.0);
        prop_assert!(v.total <= beta * y2 + p as f64 * (1.0 + beta * max_eig).ln() + 1e-12 * (1.0 + v.total));
        // yᵀ(𝟙 + βΣ)⁻¹y ≤ ‖y‖²
        prop_assert!(v.quad <= beta * y2 * (1.0 + 1e-12));
    }

    #[test]
    fn mean_field_decomposition(p in 1usize..6, n in 1usize..5000, seed in any::<u64>(), beta in 0.01f64..5.0) {
        let s = SeedSpec::new(seed);
        let sigma = { let a = common::gaussian_matrix(p, p, s); &a * a.transpose() };
        let y = DVector::from_iterator(p, common::gaussian_matrix(p, 1, s.derive(1)).iter().copied());
        let base = psi(&sigma, &y, beta).unwrap();
        let mf = psi_mf(&sigma, &y, beta, n).unwrap();
        let expected = (n - 1) as f64 * base.quad;
        prop_assert!(((mf - base.total) - expected).abs() <= 1e-12 * expected.abs().max(base.total).max(1e-300) * 4.0);
    }
}

/// Along `D + tΔ` the sample objective is concave: second differences are non-positive.
#[test]
fn dual_objective_is_concave_on_lines() {
    let g = unit_grid(3);
    let tol = Tolerances::default();
    let k1 = random_psd(&g, 3, 1.0, SeedSpec::new(1));
    let k2 = random_psd(&g, 3, 0.5, SeedSpec::new(2));
    let obj = DualObjective::new(&k2, &k1, 1.0, &ActivationSpec::tanh(), 20_000, SeedSpec::new(3), &tol).unwrap();
    for line in 0..10u64 {
        let d = random_symmetric(3, SeedSpec::new(100 + line)) * 0.1;
        let delta = random_symmetric(3, SeedSpec::new(200 + line));
        let f: Vec<f64> = (0..=20).map(|i| obj.value(&(&d + &delta * (-0.2 + 0.02 * i as f64)))).collect();
        for w in f.windows(3) {
            let second = w[0] - 2.0 * w[1] + w[2];
            assert!(second <= 1e-9 * (1.0 + w[1].abs()), "line {line}: second difference {second}");
        }
    }
}

#[test]
fn closed_form_is_the_legendre_transform() {
    for x in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let cf = scalar_rate_closed_form(x, 1.0, 1.0).unwrap();
        assert!((cf - legendre_scan(x)).abs() <= 1e-6, "x = {x}");
    }
}

#[test]
fn rate_vanishes_at_the_limit_step_and_is_nonnegative() {
    let g = unit_grid(2);
    let tol = Tolerances::default();
    let act = ActivationSpec::tanh();
    let k1 = random_psd(&g, 2, 1.0, SeedSpec::new(4));
    let opts = RateOptions { mc_samples: 20_000, seed: SeedSpec::new(8), ..RateOptions::default() };
    let at_limit = rate_eval(&nngp_step(&k1, 1.0, 0.0, &act, &NngpOptions::default(), &tol).unwrap(), &k1, 1.0, &act, &opts, &tol).unwrap();
    assert!(at_limit.value <= 3.0 * at_limit.mc_stderr + 1e-3, "{at_limit:?}");
    for s in 0..3u64 {
        let k2 = random_psd(&g, 2, 0.3, SeedSpec::new(20 + s));
        let est = rate_eval(&k2, &k1, 1.0, &act, &opts, &tol).unwrap();
        assert!(est.value >= -3.0 * est.mc_stderr);
    }
}

/// Rates at small perturbations of `(K₁, K₂)` do not fall far below the rate at the limit.
#[test]
fn rate_is_lower_semicontinuous_along_perturbations() {
    let g = point();
    let tol = Tolerances::default();
    let act = ActivationSpec::clipped_linear(20.0).unwrap();
    let opts = RateOptions { mc_samples: 50_000, seed: SeedSpec::new(2), ..RateOptions::default() };
    let scalar = |v: f64| OperatorRep::from_sym(g.clone(), DMatrix::from_element(1, 1, v)).unwrap();
    let limit = rate_eval(&scalar(2.0), &scalar(1.0), 1.0, &act, &opts, &tol).unwrap();
    let seq: Vec<_> = (1..=4)
        .map(|k| {
            let eps = 0.1 / (k * k) as f64;
            rate_eval(&scalar(2.0 + eps), &scalar(1.0 - eps), 1.0, &act, &opts, &tol).unwrap()
        })
        .collect();
    let liminf = seq.iter().map(|e| e.value).fold(f64::INFINITY, f64::min);
    let se = (limit.mc_stderr.powi(2) + seq.iter().map(|e| e.mc_stderr.powi(2)).fold(0.0, f64::max)).sqrt();
    assert!(limit.value <= liminf + 3.0 * se + 1e-9, "limit {} liminf {liminf}", limit.value);
}

#[test]
fn identity_is_rejected_by_rate_ops() {
    let g = point();
    let k = OperatorRep::from_sym(g, DMatrix::from_element(1, 1, 1.0)).unwrap();
    let err = rate_eval(&k, &k, 1.0, &ActivationSpec::identity(), &RateOptions::default(), &Tolerances::default());
    assert!(matches!(err, Err(nngp_ldp::Error::UnsupportedGrowth(_))));
}
