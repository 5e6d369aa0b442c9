#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DMatrix;
use nngp_ldp::operator::{make_grid, BoxDomain, Grid, OperatorRep, QuadratureRule};
use nngp_ldp::rng::{fill_normals, SeedSpec};

pub fn unit_grid(n: usize) -> Arc<Grid> {
    Arc::new(make_grid(&BoxDomain::interval(0.0, 1.0).unwrap(), n, QuadratureRule::GaussLegendre).unwrap())
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: SeedSpec) -> DMatrix<f64> {
    let mut v = vec![0.0; rows * cols];
    fill_normals(&mut seed.rng(), &mut v);
    DMatrix::from_vec(rows, cols, v)
}

/// `A Aᵀ / rank` with `A` an `n × rank` Gaussian matrix.
pub fn random_psd(grid: &Arc<Grid>, rank: usize, scale: f64, seed: SeedSpec) -> OperatorRep {
    let a = gaussian_matrix(grid.len(), rank, seed);
    OperatorRep::from_sym(grid.clone(), &a * a.transpose() * (scale / rank as f64)).unwrap()
}

pub fn random_symmetric(n: usize, seed: SeedSpec) -> DMatrix<f64> {
    let a = gaussian_matrix(n, n, seed);
    (&a + a.transpose()) * 0.5
}

/// Kernel with diagonal in `[lo, hi]`: a random correlation matrix scaled by
/// random standard deviations.
pub fn kernel_with_diagonal(n: usize, lo: f64, hi: f64, seed: SeedSpec) -> OperatorRep {
    let g = unit_grid(n);
    let c = random_psd(&g, n.max(2), 1.0, seed).kernel().values;
    let d: Vec<f64> = (0..n).map(|i| c[(i, i)]).collect();
    let u = gaussian_matrix(n, 1, seed.derive(1));
    let sd: Vec<f64> = (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * (0.5 + 0.5 * (u[i]).tanh())).exp().sqrt()).collect();
    let kern = DMatrix::from_fn(n, n, |i, j| sd[i] * sd[j] * c[(i, j)] / (d[i] * d[j]).sqrt());
    let sw = g.sqrt_weights();
    OperatorRep::from_sym(g.clone(), DMatrix::from_fn(n, n, |i, j| sw[i] * kern[(i, j)] * sw[j])).unwrap()
}

/// Legendre transform of the chi-square log-MGF by direct scan over the dual variable.
pub fn legendre_scan(x: f64) -> f64 {
    // sup_θ θx − ½·(−log(1 − 2θ)) over θ < ½, with x = λk₂/k₁
    let mut best = f64::NEG_INFINITY;
    let (lo, hi) = (-50.0, 0.5 - 1e-9);
    let steps = 200_000;
    let mut arg = 0.0;
    for i in 0..=steps {
        let t = lo + (hi - lo) * i as f64 / steps as f64;
        let v = t * x + 0.5 * (1.0 - 2.0 * t).ln();
        if v > best {
            best = v;
            arg = t;
        }
    }
    // golden-section refinement around the scan maximum
    let h = (hi - lo) / steps as f64;
    let (mut a, mut b) = ((arg - h).max(lo), (arg + h).min(hi));
    let f = |t: f64| t * x + 0.5 * (1.0 - 2.0 * t).ln();
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    best.max(f(0.5 * (a + b)))
}
