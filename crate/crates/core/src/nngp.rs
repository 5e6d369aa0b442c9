//! The deterministic infinite-width recursion
//! `𝒦^{ℓ+1}(x, x') = b + (1/λ)·E[σ(Z(x))σ(Z(x'))]`, `Z ~ 𝒩(0, 𝒦^ℓ)`.
//!
//! Each bivariate Gaussian expectation is computed by nested panel
//! Gauss–Legendre quadrature on `[-T, T]²` with panel edges placed on the
//! activation's kinks, which keeps ReLU-type integrands at full accuracy.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{init_kernel, simulate_chain, NetworkConfig};
use crate::error::{invalid, Result};
use crate::field::ActivationSpec;
use crate::operator::{project_operator, Grid, OperatorRep, Tolerances};
use crate::quadrature::NormalQuadrature;
use crate::rng::SeedSpec;
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NngpOptions {
    /// Gauss–Legendre nodes per panel.
    pub quadrature_nodes: usize,
    /// Integration range `[-T, T]` in standard-normal units.
    pub truncation: f64,
    pub correlation_clamp: f64,
}

impl Default for NngpOptions {
    fn default() -> Self {
        Self { quadrature_nodes: 40, truncation: 10.0, correlation_clamp: 1.0 - 1e-12 }
    }
}

impl NngpOptions {
    pub fn with_nodes(nodes: usize) -> Self {
        Self { quadrature_nodes: nodes, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.quadrature_nodes < 2 {
            return Err(invalid("quadrature_nodes must be >= 2"));
        }
        if !(self.truncation.is_finite() && self.truncation >= 4.0) {
            return Err(invalid("truncation must be >= 4"));
        }
        if !(self.correlation_clamp > 0.0 && self.correlation_clamp <= 1.0) {
            return Err(invalid("correlation_clamp must lie in (0, 1]"));
        }
        Ok(())
    }
}

fn sorted_splits(mut v: Vec<f64>) -> Vec<f64> {
    v.retain(|x| x.is_finite());
    v.push(0.0);
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// `E[σ(Z₁)σ(Z₂)]` for a centred pair with variances `a`, `c` and covariance `k`.
pub fn pair_expectation(act: &ActivationSpec, a: f64, c: f64, k: f64, q: &NormalQuadrature, clamp: f64) -> f64 {
    let bps = act.breakpoints();
    let s0 = act.apply(0.0);
    let marginal = |var: f64| {
        let sd = var.sqrt();
        let splits = sorted_splits(bps.iter().map(|b| b / sd).collect());
        q.expect(|u| act.apply(sd * u), &splits)
    };
    if a <= 0.0 && c <= 0.0 {
        return s0 * s0;
    }
    if a <= 0.0 {
        return if s0 == 0.0 { 0.0 } else { s0 * marginal(c) };
    }
    if c <= 0.0 {
        return if s0 == 0.0 { 0.0 } else { s0 * marginal(a) };
    }
    let rho = (k / (a * c).sqrt()).clamp(-clamp, clamp);
    let l11 = a.sqrt();
    let l21 = c.sqrt() * rho;
    let l22 = c.sqrt() * (1.0 - rho * rho).sqrt();
    let outer = sorted_splits(bps.iter().flat_map(|b| [b / l11, b / l21]).collect());
    let mut inner_splits = Vec::with_capacity(bps.len() + 1);
    q.expect(
        |u| {
            let su = act.apply(l11 * u);
            if su == 0.0 {
                return 0.0;
            }
            inner_splits.clear();
            inner_splits.extend(bps.iter().map(|b| (b - l21 * u) / l22));
            let splits = sorted_splits(std::mem::take(&mut inner_splits));
            let v = q.expect(|v| act.apply(l21 * u + l22 * v), &splits);
            inner_splits = splits;
            su * v
        },
        &outer,
    )
}

/// `E[σ(Z)²]`, `Z ~ 𝒩(0, a)`.
pub fn diagonal_expectation(act: &ActivationSpec, a: f64, q: &NormalQuadrature) -> f64 {
    if a <= 0.0 {
        return act.apply(0.0).powi(2);
    }
    let sd = a.sqrt();
    let splits = sorted_splits(act.breakpoints().iter().map(|b| b / sd).collect());
    q.expect(|u| act.apply(sd * u).powi(2), &splits)
}

fn map_pairs(k: &OperatorRep, entry: impl Fn(f64, f64, f64, bool) -> f64 + Sync) -> DMatrix<f64> {
    let kern = k.kernel().values;
    let n = kern.nrows();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| entry(kern[(i, i)], kern[(j, j)], kern[(i, j)], i == j))
        .collect();
    let mut out = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(&vals) {
        out[(i, j)] = *v;
        out[(j, i)] = *v;
    }
    out
}

fn kernel_matrix_to_operator(grid: &Arc<Grid>, kern: DMatrix<f64>, tol: &Tolerances) -> OperatorRep {
    let sw = grid.sqrt_weights();
    let n = sw.len();
    let sym = DMatrix::from_fn(n, n, |i, j| sw[i] * kern[(i, j)] * sw[j]);
    project_operator(OperatorRep::from_sym_unchecked(grid.clone(), sym), tol)
}

/// One step of the infinite-width recursion.
pub fn nngp_step(
    k: &OperatorRep,
    lambda: f64,
    b: f64,
    act: &ActivationSpec,
    opts: &NngpOptions,
    tol: &Tolerances,
) -> Result<OperatorRep> {
    opts.validate()?;
    k.check_psd(tol)?;
    let q = NormalQuadrature::new(opts.quadrature_nodes, opts.truncation);
    let kern = map_pairs(k, |a, c, kxy, diag| {
        let e = if diag {
            diagonal_expectation(act, a, &q)
        } else {
            pair_expectation(act, a, c, kxy, &q, opts.correlation_clamp)
        };
        b + e / lambda
    });
    Ok(kernel_matrix_to_operator(k.grid(), kern, tol))
}

/// Arc-cosine closed form of the ReLU step.
pub fn relu_arccos_kernel(k: &OperatorRep, lambda: f64, b: f64) -> OperatorRep {
    let kern = map_pairs(k, |a, c, kxy, _| {
        if a <= 0.0 || c <= 0.0 {
            return b;
        }
        let norm = (a * c).sqrt();
        let cos = (kxy / norm).clamp(-1.0, 1.0);
        let theta = cos.acos();
        b + norm / (2.0 * PI) * (theta.sin() + (PI - theta) * cos) / lambda
    });
    kernel_matrix_to_operator(k.grid(), kern, &Tolerances::default())
}

/// Closed form of the erf step: `(2/π)·arcsin(2k/√((1+2a)(1+2c)))`.
pub fn erf_kernel(k: &OperatorRep, lambda: f64, b: f64) -> OperatorRep {
    let kern = map_pairs(k, |a, c, kxy, _| {
        let arg = (2.0 * kxy / ((1.0 + 2.0 * a) * (1.0 + 2.0 * c)).sqrt()).clamp(-1.0, 1.0);
        b + 2.0 / PI * arg.asin() / lambda
    });
    kernel_matrix_to_operator(k.grid(), kern, &Tolerances::default())
}

/// `(𝒦²_∞, …, 𝒦^{L+1}_∞)`.
pub fn nngp_chain(cfg: &NetworkConfig, grid: Arc<Grid>, opts: &NngpOptions, tol: &Tolerances) -> Result<Vec<OperatorRep>> {
    cfg.validate()?;
    let mut current = init_kernel(grid, cfg.lambda(0), cfg.bias(1))?;
    let mut out = Vec::with_capacity(cfg.depth);
    for l in 1..=cfg.depth {
        current = nngp_step(&current, cfg.lambda(l), cfg.bias(l + 1), &cfg.activation, opts, tol)?;
        out.push(current.clone());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LlnRow {
    pub n: usize,
    /// Layer index `ℓ` of `K^ℓ`, from 2 to `L+1`.
    pub layer: usize,
    pub median: f64,
    pub iqr: f64,
}

/// Median and IQR over replicates of `‖K^ℓ_N − K^ℓ_∞‖₁`, sorted by `N` then layer.
/// Replicate `r` at scale `N` uses `seed.derive(N).derive(r)`.
#[allow(clippy::too_many_arguments)]
pub fn lln_distance_curve(
    cfg: &NetworkConfig,
    grid: Arc<Grid>,
    ns: &[usize],
    reps: usize,
    seed: SeedSpec,
    opts: &NngpOptions,
    tol: &Tolerances,
) -> Result<Vec<LlnRow>> {
    if reps == 0 {
        return Err(invalid("reps must be >= 1"));
    }
    let limit = nngp_chain(cfg, grid.clone(), opts, tol)?;
    let mut sorted = ns.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rows = Vec::new();
    for &n in &sorted {
        let dists: Vec<Vec<f64>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let chain = simulate_chain(cfg, n, grid.clone(), seed.derive(n as u64).derive(r as u64), tol)?;
                chain
                    .operators
                    .iter()
                    .zip(&limit)
                    .map(|(a, b)| Ok(a.try_sub(b)?.trace_norm()))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        for l in 0..cfg.depth {
            let d: Vec<f64> = dists.iter().map(|v| v[l]).collect();
            rows.push(LlnRow { n, layer: l + 2, median: stats::median(&d), iqr: stats::iqr(&d) });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{kernel_to_operator, make_grid, BoxDomain, KernelGrid, QuadratureRule};

    fn pair(a: f64, c: f64, k: f64) -> OperatorRep {
        let g = Arc::new(Grid::from_points(vec![vec![0.0], vec![1.0]], 1.0).unwrap());
        kernel_to_operator(&KernelGrid::new(g, DMatrix::from_row_slice(2, 2, &[a, k, k, c])).unwrap(), &Tolerances::default()).unwrap()
    }

    #[test]
    fn relu_diagonal_and_independent_pair() {
        let q = NormalQuadrature::new(40, 10.0);
        let act = ActivationSpec::relu();
        assert!((diagonal_expectation(&act, 1.0, &q) - 0.5).abs() < 1e-12);
        assert!((pair_expectation(&act, 1.0, 1.0, 0.0, &q, 1.0 - 1e-12) - 1.0 / (2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn arccos_special_values() {
        let r = relu_arccos_kernel(&pair(1.0, 1.0, 1.0 - 1e-15), 1.0, 0.0).kernel();
        assert!((r.values[(0, 1)] - 0.5).abs() < 1e-7);
        let r = relu_arccos_kernel(&pair(1.0, 1.0, 0.0), 1.0, 0.0).kernel();
        assert!((r.values[(0, 1)] - 1.0 / (2.0 * PI)).abs() < 1e-15);
        let r = relu_arccos_kernel(&pair(0.0, 1.0, 0.0), 1.0, 0.0).kernel();
        assert_eq!(r.values[(0, 0)], 0.0);
        assert_eq!(r.values[(0, 1)], 0.0);
    }

    #[test]
    fn relu_matches_arccos() {
        let tol = Tolerances::default();
        let act = ActivationSpec::relu();
        for (a, c, rho) in [(1e-3, 10.0, 0.3), (1.0, 1.0, 0.999_999), (2.0, 0.5, -0.7), (10.0, 10.0, 1.0 - 1e-13)] {
            let k = pair(a, c, rho * (a * c).sqrt());
            let q = nngp_step(&k, 1.0, 0.0, &act, &NngpOptions::default(), &tol).unwrap().kernel();
            let e = relu_arccos_kernel(&k, 1.0, 0.0).kernel();
            assert!(q.sup_distance(&e) < 1e-6, "({a},{c},{rho}): {}", q.sup_distance(&e));
        }
    }

    #[test]
    fn erf_matches_closed_form() {
        let tol = Tolerances::default();
        let k = pair(0.3, 10.0, 0.8 * 3f64.sqrt());
        let q = nngp_step(&k, 2.0, 0.1, &ActivationSpec::erf(), &NngpOptions::default(), &tol).unwrap().kernel();
        let e = erf_kernel(&k, 2.0, 0.1).kernel();
        assert!(q.sup_distance(&e) < 1e-8, "{}", q.sup_distance(&e));
    }

    #[test]
    fn identity_is_fixed_point() {
        let tol = Tolerances::default();
        let g = Arc::new(make_grid(&BoxDomain::interval(-1.0, 2.0).unwrap(), 8, QuadratureRule::GaussLegendre).unwrap());
        let k = kernel_to_operator(&KernelGrid::from_fn(g, |x, y| 0.3 + x[0] * y[0] + (-(x[0] - y[0]).powi(2)).exp()), &tol).unwrap();
        let out = nngp_step(&k, 1.0, 0.0, &ActivationSpec::identity(), &NngpOptions::default(), &tol).unwrap();
        assert!(out.kernel().sup_distance(&k.kernel()) <= 1e-12 * k.kernel().values.amax());
        let half = nngp_step(&k, 2.0, 0.0, &ActivationSpec::identity(), &NngpOptions::default(), &tol).unwrap();
        assert!((half.sym() * 2.0 - k.sym()).amax() < 1e-12);
    }

    #[test]
    fn clipped_and_custom_tables() {
        let q = NormalQuadrature::new(40, 10.0);
        // clipped at 1 with unit variance: E[min(Z²,1)] = 1 − 2(φ(1) + (1−Φ(1))) + 2(1−Φ(1))
        let phi1 = (-0.5f64).exp() / (2.0 * PI).sqrt();
        let tail = 0.158_655_253_931_457_05;
        let exact = (1.0 - 2.0 * tail - 2.0 * phi1) + 2.0 * tail;
        let got = diagonal_expectation(&ActivationSpec::clipped_linear(1.0).unwrap(), 1.0, &q);
        assert!((got - exact).abs() < 1e-12, "{got} vs {exact}");
        let table = ActivationSpec::custom(vec![0.0, 1.0], vec![0.0, 1.0], 1.0, 1.0, Some(1.0)).unwrap();
        let got = pair_expectation(&table, 1.0, 1.0, 0.0, &q, 1.0 - 1e-12);
        let m = diagonal_expectation(&ActivationSpec::clipped_linear(1.0).unwrap(), 1.0, &q);
        // σ = clamp(x, 0, 1); independent pair factorises
        let e1 = q.expect(|u| u.clamp(0.0, 1.0), &[0.0, 1.0]);
        assert!((got - e1 * e1).abs() < 1e-12 && m > 0.0);
    }

    #[test]
    fn refinement_is_cauchy() {
        let tol = Tolerances::default();
        let g = Arc::new(make_grid(&BoxDomain::interval(0.0, 1.0).unwrap(), 6, QuadratureRule::GaussLegendre).unwrap());
        let k = init_kernel(g, 1.0, 0.05).unwrap();
        let act = ActivationSpec::tanh();
        let r: Vec<_> = [20, 40, 80]
            .iter()
            .map(|n| nngp_step(&k, 1.0, 0.0, &act, &NngpOptions::with_nodes(*n), &tol).unwrap().kernel())
            .collect();
        let d1 = r[0].sup_distance(&r[1]);
        let d2 = r[1].sup_distance(&r[2]);
        assert!(d2 <= d1, "{d1} {d2}");
    }

    #[test]
    fn scalar_chain_scaling() {
        let tol = Tolerances::default();
        let mut cfg = NetworkConfig::simple(3, 1, ActivationSpec::identity());
        let g = Arc::new(Grid::new(vec![vec![1.5]], vec![1.0]).unwrap());
        let ks = nngp_chain(&cfg, g.clone(), &NngpOptions::default(), &tol).unwrap();
        for k in &ks {
            assert!((k.trace() - 2.25).abs() < 1e-12);
        }
        cfg.lambdas = vec![1.0, 2.0, 2.0, 2.0];
        let ks = nngp_chain(&cfg, g, &NngpOptions::default(), &tol).unwrap();
        assert!((ks[2].trace() - 2.25 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn lln_table_deterministic() {
        let tol = Tolerances::default();
        let cfg = NetworkConfig::simple(1, 1, ActivationSpec::identity());
        let g = Arc::new(Grid::new(vec![vec![1.0]], vec![1.0]).unwrap());
        let a = lln_distance_curve(&cfg, g.clone(), &[50, 10], 1, SeedSpec::new(3), &NngpOptions::default(), &tol).unwrap();
        let b = lln_distance_curve(&cfg, g.clone(), &[10, 50], 1, SeedSpec::new(3), &NngpOptions::default(), &tol).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].n, 10);
        let chain = simulate_chain(&cfg, 10, g, SeedSpec::new(3).derive(10).derive(0), &tol).unwrap();
        assert!((a[0].median - (chain.last().trace() - 1.0).abs()).abs() < 1e-15);
    }
}
