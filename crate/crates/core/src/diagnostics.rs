//! Empirical diagnostics: Gaussianity of network outputs at finite width and
//! tail frequencies of the largest singular value of Gaussian matrices.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::chain::{simulate_chain, NetworkConfig};
use crate::error::{invalid, Result};
use crate::field::FieldSampler;
use crate::nngp::{nngp_chain, NngpOptions};
use crate::operator::{Grid, Tolerances};
use crate::rng::{fill_normals, SeedSpec};
use crate::stats;

/// `E‖Y‖` for `Y ~ 𝒩(0, 𝟙_d)`.
pub fn mean_norm(d: usize) -> f64 {
    let d = d as f64;
    2f64.sqrt() * (ln_gamma(0.5 * (d + 1.0)) - ln_gamma(0.5 * d)).exp()
}

/// `E‖a − Y‖` for `Y ~ 𝒩(0, 𝟙_d)` as a function of `|a|²`:
/// `E‖Y‖·₁F₁(−½; d/2; −|a|²/2)`, evaluated through Kummer's transformation.
pub fn expected_distance(a2: f64, d: usize) -> f64 {
    let x = 0.5 * a2;
    let b = 0.5 * d as f64;
    if x > 600.0 {
        return (a2 + d as f64 - 1.0).sqrt();
    }
    // e^{-x}·₁F₁(b + ½; b; x), all terms positive
    let mut term = (-x).exp();
    let mut sum = term;
    let mut k = 0.0;
    while k < 10_000.0 {
        term *= (b + 0.5 + k) / (b + k) * x / (k + 1.0);
        sum += term;
        k += 1.0;
        if term < 1e-17 * sum && k > x {
            break;
        }
    }
    mean_norm(d) * sum
}

/// Energy statistic `n·(2/n Σ E‖z_i − Y‖ − E‖Y − Y'‖ − 1/n² Σ ‖z_i − z_j‖)`
/// of the rows of `z` against `𝒩(0, 𝟙_d)`.
pub fn energy_statistic(z: &DMatrix<f64>) -> f64 {
    let n = z.nrows();
    let d = z.ncols();
    let rows: Vec<Vec<f64>> = z.row_iter().map(|r| r.iter().cloned().collect()).collect();
    let cross: f64 = rows.iter().map(|r| expected_distance(r.iter().map(|v| v * v).sum(), d)).sum();
    let pair_parts: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = &rows[i];
            rows[i + 1..]
                .iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .sum()
        })
        .collect();
    let pairs = 2.0 * pair_parts.iter().sum::<f64>();
    let nf = n as f64;
    nf * (2.0 * cross / nf - 2f64.sqrt() * mean_norm(d) - pairs / (nf * nf))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CltOptions {
    pub level: f64,
    /// Parametric bootstrap replicates for the energy-test p-value.
    pub bootstrap: usize,
    pub nngp: NngpOptions,
}

impl Default for CltOptions {
    fn default() -> Self {
        Self { level: 0.01, bootstrap: 199, nngp: NngpOptions::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CoordinateMoments {
    pub index: usize,
    pub skewness: f64,
    pub kurtosis: f64,
    pub skew_z: f64,
    pub kurt_z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CltReport {
    pub n: usize,
    pub draws: usize,
    /// Dimension after whitening by the limiting covariance.
    pub dim: usize,
    pub energy_statistic: f64,
    pub p_value: f64,
    pub level: f64,
    pub passed: bool,
    pub coordinates: Vec<CoordinateMoments>,
    /// Coordinates whose skewness or kurtosis z-score exceeds the
    /// Bonferroni-corrected two-sided threshold.
    pub coordinate_rejections: usize,
}

/// Draws `h^{(L+1)}` at the inputs (`M` output units each) and tests them
/// against `𝒩(0, Ĉ ⊗ 𝟙_M)` with `Ĉ` the infinite-width covariance.
///
/// Draw `r` simulates the covariance chain with `seed.derive(r)` and then the
/// outputs given `K^{L+1}`, which has the law of the weight recursion.
#[allow(clippy::too_many_arguments)]
pub fn clt_diagnostic(
    cfg: &NetworkConfig,
    inputs: &[Vec<f64>],
    n: usize,
    m: usize,
    draws: usize,
    seed: SeedSpec,
    opts: &CltOptions,
    tol: &Tolerances,
) -> Result<CltReport> {
    cfg.validate()?;
    if m == 0 || m > cfg.output_dim {
        return Err(invalid(format!("output copies M = {m} must lie in 1..={}", cfg.output_dim)));
    }
    if draws < 2 {
        return Err(invalid("need at least two draws"));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) || opts.bootstrap == 0 {
        return Err(invalid("clt level must lie in (0, 1) and bootstrap >= 1"));
    }
    let grid = Arc::new(Grid::from_points(inputs.to_vec(), 1.0)?);
    let p = grid.len();
    let limit = nngp_chain(cfg, grid.clone(), &opts.nngp, tol)?.pop().expect("depth >= 1");
    let eig = SymmetricEigen::new(limit.sym().clone());
    let floor = limit.round_off_floor().max(tol.psd_tol);
    let keep: Vec<usize> = (0..p).filter(|&i| eig.eigenvalues[i] > floor).collect();
    let r = keep.len();
    if r == 0 {
        return Err(invalid("limiting output covariance vanishes at the inputs"));
    }
    let whiten = DMatrix::from_fn(r, p, |a, b| eig.eigenvectors[(b, keep[a])] / eig.eigenvalues[keep[a]].sqrt());
    let dim = r * m;

    let rows: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|k| {
            let s = seed.derive(k as u64);
            let chain = simulate_chain(cfg, n, grid.clone(), s, tol)?;
            let out = FieldSampler::new(chain.last(), tol)?.sample(m, s.derive(u64::MAX)).values;
            let mut z = Vec::with_capacity(dim);
            for row in out.row_iter() {
                z.extend((&whiten * row.transpose()).iter());
            }
            Ok(z)
        })
        .collect::<Result<_>>()?;
    let z = DMatrix::from_fn(draws, dim, |i, j| rows[i][j]);
    let t = energy_statistic(&z);

    let boot: Vec<f64> = (0..opts.bootstrap)
        .map(|b| {
            let mut v = vec![0.0; draws * dim];
            fill_normals(&mut seed.derive(u64::MAX - 1).derive(b as u64).rng(), &mut v);
            energy_statistic(&DMatrix::from_vec(draws, dim, v))
        })
        .collect();
    let exceed = boot.iter().filter(|v| **v >= t).count();
    let p_value = (1 + exceed) as f64 / (1 + opts.bootstrap) as f64;

    let nf = draws as f64;
    let coordinates: Vec<CoordinateMoments> = (0..dim)
        .map(|j| {
            let col: Vec<f64> = z.column(j).iter().cloned().collect();
            let (skewness, kurtosis) = stats::skew_kurt(&col);
            CoordinateMoments {
                index: j,
                skewness,
                kurtosis,
                skew_z: skewness / (6.0 / nf).sqrt(),
                kurt_z: (kurtosis - 3.0) / (24.0 / nf).sqrt(),
            }
        })
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let crit = normal.inverse_cdf(1.0 - opts.level / (4.0 * dim as f64));
    let coordinate_rejections = coordinates
        .iter()
        .filter(|c| c.skew_z.abs() > crit || c.kurt_z.abs() > crit)
        .count();
    Ok(CltReport {
        n,
        draws,
        dim,
        energy_statistic: t,
        p_value,
        level: opts.level,
        passed: p_value >= opts.level,
        coordinates,
        coordinate_rejections,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SingularTailRow {
    pub t: f64,
    /// `C(√(n2/n1) + 1 + t)`.
    pub threshold: f64,
    pub exceedances: usize,
    pub reps: usize,
    pub empirical: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
    /// `2e^{−n1 t²}`.
    pub bound: f64,
    /// Lower Wilson edge above the bound.
    pub violated: bool,
}

/// Exceedance frequencies of `‖W‖ > C(√(n2/n1) + 1 + t)` for `n1 × n2`
/// matrices with iid `𝒩(0, λ/n1)` entries, with 95% Wilson intervals.
pub fn singvalue_tail_check(
    n1: usize,
    n2: usize,
    lambda: f64,
    t_values: &[f64],
    reps: usize,
    c: f64,
    seed: SeedSpec,
) -> Result<Vec<SingularTailRow>> {
    if n1 == 0 || n2 == 0 {
        return Err(invalid("matrix dimensions must be positive"));
    }
    if reps < 1000 {
        return Err(invalid("singular-value tail check needs reps >= 1000"));
    }
    if !(lambda > 0.0 && c > 0.0) || t_values.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(invalid("lambda and C must be positive, t non-negative"));
    }
    let sd = (lambda / n1 as f64).sqrt();
    let tops: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut v = vec![0.0; n1 * n2];
            fill_normals(&mut seed.derive(r as u64).rng(), &mut v);
            let w = DMatrix::from_vec(n1, n2, v) * sd;
            w.singular_values().max()
        })
        .collect();
    let base = (n2 as f64 / n1 as f64).sqrt() + 1.0;
    Ok(t_values
        .iter()
        .map(|&t| {
            let threshold = c * (base + t);
            let exceedances = tops.iter().filter(|s| **s > threshold).count();
            let (wilson_low, wilson_high) = stats::wilson(exceedances as u64, reps as u64, 1.959_963_984_540_054);
            let bound = 2.0 * (-(n1 as f64) * t * t).exp();
            SingularTailRow {
                t,
                threshold,
                exceedances,
                reps,
                empirical: exceedances as f64 / reps as f64,
                wilson_low,
                wilson_high,
                bound,
                violated: wilson_low > bound,
            }
        })
        .collect())
}
