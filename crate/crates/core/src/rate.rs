//! The rate function
//! `I_λ(K₂|K₁) = sup_D { tr(D K₂) − log E[exp(tr(D C_h)/λ)] }`, `h ~ 𝒩_H(0, K₁)`,
//! evaluated by L-BFGS ascent on a Monte-Carlo estimate of the log-MGF, plus
//! the chain rate and empirical tail-decay slopes.
//!
//! In `√w`-coordinates `tr(D C_h) = sᵀ D s` with `s = √w ⊙ σ(h)`, so the
//! objective only needs the sampled vectors `s_m` and symmetric matrices `D`.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{activated_fields, simulate_chain, ChainState, NetworkConfig};
use crate::error::{invalid, Error, Result};
use crate::field::{ActivationSpec, FieldSampler, SAMPLE_BLOCK};
use crate::operator::{Grid, OperatorRep, Tolerances};
use crate::rng::SeedSpec;
use crate::stats;

/// Dual variable `D`, a bounded symmetric operator in `√w`-coordinates.
#[derive(Clone, Debug)]
pub struct DualVariable {
    pub grid: Arc<Grid>,
    pub sym: DMatrix<f64>,
}

impl DualVariable {
    pub fn zero(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        Self { grid, sym: DMatrix::zeros(n, n) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateOptions {
    pub mc_samples: usize,
    pub max_iter: usize,
    pub gtol: f64,
    /// Minimum effective sample size of the tilted weights; `None` means 1% of `mc_samples`.
    pub ess_floor: Option<f64>,
    /// Set by the caller; not part of serialised options.
    #[serde(skip)]
    pub seed: SeedSpec,
    /// Restrict `D` to the span of the top eigenvectors of `K₂`.
    pub spectral_rank: Option<usize>,
    pub lbfgs_memory: usize,
    pub max_backtracks: usize,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self {
            mc_samples: 200_000,
            max_iter: 500,
            gtol: 1e-4,
            ess_floor: None,
            seed: SeedSpec::new(0),
            spectral_rank: None,
            lbfgs_memory: 10,
            max_backtracks: 40,
        }
    }
}

impl RateOptions {
    pub fn ess_floor(&self) -> f64 {
        self.ess_floor.unwrap_or(0.01 * self.mc_samples as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_samples < 2 || self.max_iter == 0 || self.lbfgs_memory == 0 || self.max_backtracks == 0 {
            return Err(invalid("rate options: mc_samples >= 2, max_iter, lbfgs_memory and max_backtracks >= 1"));
        }
        if !(self.gtol.is_finite() && self.gtol > 0.0) {
            return Err(invalid("rate options: gtol must be positive"));
        }
        if let Some(f) = self.ess_floor {
            if !(f.is_finite() && f >= 0.0) {
                return Err(invalid("rate options: ess_floor must be non-negative"));
            }
        }
        if self.spectral_rank == Some(0) {
            return Err(invalid("rate options: spectral_rank must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MgfEstimate {
    pub value: f64,
    pub stderr: f64,
    pub ess: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateEstimate {
    pub value: f64,
    #[serde(skip)]
    pub dual: DualVariable,
    pub mc_stderr: f64,
    pub iterations: usize,
    pub converged: bool,
    pub ess_min: f64,
    pub grad_norm: f64,
    /// Dual objective after each accepted step, starting with `D = 0`.
    pub objective_trace: Vec<f64>,
}

/// Sampled `s_m` for a fixed `K₁`; evaluates the dual objective with common
/// random numbers for any `D`.
#[derive(Clone, Debug)]
pub struct DualObjective {
    grid: Arc<Grid>,
    k2: DMatrix<f64>,
    s: DMatrix<f64>,
    lambda: f64,
}

#[derive(Clone, Debug)]
struct Eval {
    mgf: MgfEstimate,
    objective: f64,
    weights: Vec<f64>,
}

impl DualObjective {
    pub fn new(
        k2: &OperatorRep,
        k1: &OperatorRep,
        lambda: f64,
        act: &ActivationSpec,
        m: usize,
        seed: SeedSpec,
        tol: &Tolerances,
    ) -> Result<Self> {
        act.require_subquadratic()?;
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(invalid(format!("lambda = {lambda} must be positive")));
        }
        if m == 0 {
            return Err(invalid("mc_samples must be positive"));
        }
        k1.try_sub(k2)?;
        let sampler = FieldSampler::new(k1, tol)?;
        let s = activated_fields(&sampler, act, m, seed);
        Ok(Self { grid: k1.grid().clone(), k2: k2.sym().clone(), s, lambda })
    }

    pub fn samples(&self) -> usize {
        self.s.nrows()
    }

    /// `sᵀ D s / λ` for every sample.
    fn exponents(&self, d: &DMatrix<f64>) -> Vec<f64> {
        let m = self.s.nrows();
        let parts: Vec<Vec<f64>> = (0..m.div_ceil(SAMPLE_BLOCK))
            .into_par_iter()
            .map(|b| {
                let rows = SAMPLE_BLOCK.min(m - b * SAMPLE_BLOCK);
                let blk = self.s.rows(b * SAMPLE_BLOCK, rows);
                let sd = blk * d;
                (0..rows).map(|r| sd.row(r).dot(&blk.row(r)) / self.lambda).collect()
            })
            .collect();
        parts.concat()
    }

    fn eval(&self, d: &DMatrix<f64>) -> Eval {
        let e = self.exponents(d);
        let m = e.len() as f64;
        let top = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let u: Vec<f64> = e.iter().map(|x| (x - top).exp()).collect();
        let su: f64 = u.iter().sum();
        let su2: f64 = u.iter().map(|x| x * x).sum();
        let mean = su / m;
        let var = (su2 / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
        let mgf = MgfEstimate { value: top + mean.ln(), stderr: var.sqrt() / (m.sqrt() * mean), ess: su * su / su2 };
        let objective = d.dot(&self.k2) - mgf.value;
        Eval { mgf, objective, weights: u.into_iter().map(|x| x / su).collect() }
    }

    fn gradient(&self, weights: &[f64]) -> DMatrix<f64> {
        let m = self.s.nrows();
        let n = self.s.ncols();
        let parts: Vec<DMatrix<f64>> = (0..m.div_ceil(SAMPLE_BLOCK))
            .into_par_iter()
            .map(|b| {
                let start = b * SAMPLE_BLOCK;
                let rows = SAMPLE_BLOCK.min(m - start);
                let blk = self.s.rows(start, rows);
                let mut wblk = blk.clone_owned();
                for (r, w) in weights[start..start + rows].iter().enumerate() {
                    wblk.row_mut(r).scale_mut(*w);
                }
                blk.tr_mul(&wblk)
            })
            .collect();
        let second = parts.into_iter().fold(DMatrix::zeros(n, n), |acc, p| acc + p);
        let g = &self.k2 - second / self.lambda;
        (&g + g.transpose()) * 0.5
    }

    pub fn log_mgf(&self, d: &DMatrix<f64>) -> MgfEstimate {
        self.eval(d).mgf
    }

    /// `tr(D K₂) − log_mgf(D)`.
    pub fn value(&self, d: &DMatrix<f64>) -> f64 {
        self.eval(d).objective
    }

    /// Objective and its Frobenius gradient `K₂ − (1/λ) Σ π_m s_m s_mᵀ`.
    pub fn value_and_gradient(&self, d: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let e = self.eval(d);
        let g = self.gradient(&e.weights);
        (e.objective, g)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
}

/// `log E[exp(tr(D C_h)/λ)]` with `M` samples.
#[allow(clippy::too_many_arguments)]
pub fn log_mgf(
    d: &DualVariable,
    k1: &OperatorRep,
    lambda: f64,
    act: &ActivationSpec,
    m: usize,
    seed: SeedSpec,
    ess_floor: Option<f64>,
    tol: &Tolerances,
) -> Result<MgfEstimate> {
    let obj = DualObjective::new(k1, k1, lambda, act, m, seed, tol)?;
    if d.sym.nrows() != k1.len() {
        return Err(Error::GridMismatch);
    }
    let est = obj.log_mgf(&d.sym);
    let floor = ess_floor.unwrap_or(0.01 * m as f64);
    if est.ess < floor {
        return Err(Error::UnstableMgf { ess: est.ess, floor });
    }
    Ok(est)
}

fn projector(k2: &OperatorRep, rank: Option<usize>) -> Option<DMatrix<f64>> {
    let r = rank?;
    if r >= k2.len() {
        return None;
    }
    let v = k2.spectrum().vectors.columns(0, r).into_owned();
    Some(&v * v.transpose())
}

/// `I_λ(K₂|K₁)`.
pub fn rate_eval(
    k2: &OperatorRep,
    k1: &OperatorRep,
    lambda: f64,
    act: &ActivationSpec,
    opts: &RateOptions,
    tol: &Tolerances,
) -> Result<RateEstimate> {
    opts.validate()?;
    act.require_subquadratic()?;
    k1.check_psd(tol)?;
    k2.check_psd(tol)?;
    let obj = DualObjective::new(k2, k1, lambda, act, opts.mc_samples, opts.seed.derive(0), tol)?;
    let floor = opts.ess_floor();
    let proj = projector(k2, opts.spectral_rank);
    let project = |g: DMatrix<f64>| match &proj {
        Some(p) => p * g * p,
        None => g,
    };

    let n = k2.len();
    let mut x = DMatrix::zeros(n, n);
    let first = obj.eval(&x);
    // minimise f = −objective
    let mut f = -first.objective;
    let mut g = -project(obj.gradient(&first.weights));
    let mut ess_min = first.mgf.ess;
    let mut trace = vec![first.objective];
    let mut memory: VecDeque<(DMatrix<f64>, DMatrix<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if g.norm() <= opts.gtol {
            converged = true;
            break;
        }
        let mut p = lbfgs_direction(&g, &memory);
        if p.dot(&g) >= 0.0 {
            memory.clear();
            p = -&g;
        }
        let slope = p.dot(&g);
        let mut step = if memory.is_empty() { 1.0 / g.norm().max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = &x + &p * step;
            let e = obj.eval(&trial);
            if e.mgf.ess >= floor && e.objective.is_finite() && -e.objective <= f + 1e-4 * step * slope {
                accepted = Some((trial, e));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, e)) = accepted else { break };
        iterations += 1;
        let g_new = -project(obj.gradient(&e.weights));
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if memory.len() == opts.lbfgs_memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = -e.objective;
        g = g_new;
        ess_min = ess_min.min(e.mgf.ess);
        trace.push(e.objective);
    }
    if !converged && g.norm() <= opts.gtol {
        converged = true;
    }

    let fresh = DualObjective::new(k2, k1, lambda, act, opts.mc_samples, opts.seed.derive(1), tol)?.eval(&x);
    ess_min = ess_min.min(fresh.mgf.ess);
    Ok(RateEstimate {
        value: fresh.objective.max(0.0),
        dual: DualVariable { grid: k2.grid().clone(), sym: x },
        mc_stderr: fresh.mgf.stderr,
        iterations,
        converged,
        ess_min,
        grad_norm: g.norm(),
        objective_trace: trace,
    })
}

fn lbfgs_direction(g: &DMatrix<f64>, memory: &VecDeque<(DMatrix<f64>, DMatrix<f64>, f64)>) -> DMatrix<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}

/// `½(x − 1 − log x)`, `x = λk₂/k₁`: the rate for the identity activation on
/// a single input.
pub fn scalar_rate_closed_form(k2: f64, k1: f64, lambda: f64) -> Result<f64> {
    if !(k2 > 0.0 && k1 > 0.0 && lambda > 0.0) {
        return Err(invalid("scalar rate needs k2, k1, lambda > 0"));
    }
    let x = lambda * k2 / k1;
    Ok(0.5 * (x - 1.0 - x.ln()))
}

#[derive(Clone, Debug, Serialize)]
pub struct ChainRate {
    pub total: f64,
    /// `I_{λ_ℓ, b_{ℓ+1}}(K_{ℓ+1}|K_ℓ)`; `+∞` where `K_{ℓ+1} − b𝟙` is not non-negative.
    pub per_layer: Vec<f64>,
    pub estimates: Vec<Option<RateEstimate>>,
}

/// `Σ_ℓ m_ℓ·I_{λ_ℓ}(K_{ℓ+1} − b_{ℓ+1}𝟙 | K_ℓ)` along `(K₂, …, K_{L+1})` from `K₁`.
/// Layer `ℓ` uses `opts.seed.derive(ℓ)`.
pub fn chain_rate(
    ks: &[OperatorRep],
    k1: &OperatorRep,
    cfg: &NetworkConfig,
    opts: &RateOptions,
    tol: &Tolerances,
) -> Result<ChainRate> {
    cfg.validate()?;
    cfg.activation.require_subquadratic()?;
    if ks.len() != cfg.depth {
        return Err(invalid(format!("expected {} operators, got {}", cfg.depth, ks.len())));
    }
    let mut per_layer = Vec::with_capacity(cfg.depth);
    let mut estimates = Vec::with_capacity(cfg.depth);
    let mut total = 0.0;
    for l in 1..=cfg.depth {
        let prev = if l == 1 { k1 } else { &ks[l - 2] };
        let b = cfg.bias(l + 1);
        let target = if b != 0.0 {
            ks[l - 1].try_sub(&OperatorRep::constant_kernel(ks[l - 1].grid().clone(), b))?
        } else {
            ks[l - 1].clone()
        };
        if !target.is_nonnegative(tol) {
            per_layer.push(f64::INFINITY);
            estimates.push(None);
            total = f64::INFINITY;
            continue;
        }
        let layer_opts = RateOptions { seed: opts.seed.derive(l as u64), ..*opts };
        let est = rate_eval(&target, prev, cfg.lambda(l), &cfg.activation, &layer_opts, tol)?;
        total += cfg.width_ratios[l - 1] * est.value;
        per_layer.push(est.value);
        estimates.push(Some(est));
    }
    Ok(ChainRate { total, per_layer, estimates })
}

/// Rate of a simulated chain path.
pub fn chain_state_rate(state: &ChainState, opts: &RateOptions, tol: &Tolerances) -> Result<ChainRate> {
    chain_rate(&state.operators, &state.initial, &state.config, opts, tol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChainFunctional {
    Trace,
    TraceNorm,
    HsNorm,
    OpNorm,
    /// Kernel value `𝒦(x_i, x_j)` at grid nodes `i`, `j`.
    KernelEntry { i: usize, j: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Ge,
    Le,
}

/// `{ F(K^layer) ≥ threshold }` or `{ F(K^layer) ≤ threshold }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainEvent {
    pub functional: ChainFunctional,
    /// `ℓ` in `1..=L+1`; layer 1 is the deterministic initial kernel.
    pub layer: usize,
    pub comparison: Comparison,
    pub threshold: f64,
}

impl ChainEvent {
    pub fn validate(&self, cfg: &NetworkConfig, grid_len: usize) -> Result<()> {
        if self.layer == 0 || self.layer > cfg.depth + 1 {
            return Err(invalid(format!("event.layer must lie in 1..={}", cfg.depth + 1)));
        }
        if let ChainFunctional::KernelEntry { i, j } = self.functional {
            if i >= grid_len || j >= grid_len {
                return Err(invalid("event kernel entry outside the grid"));
            }
        }
        if !self.threshold.is_finite() {
            return Err(invalid("event.threshold must be finite"));
        }
        Ok(())
    }

    pub fn functional_value(&self, state: &ChainState) -> f64 {
        let k = state.layer(self.layer).expect("validated layer");
        match self.functional {
            ChainFunctional::Trace => k.trace(),
            ChainFunctional::TraceNorm => k.trace_norm(),
            ChainFunctional::HsNorm => k.hs_norm(),
            ChainFunctional::OpNorm => k.op_norm(),
            ChainFunctional::KernelEntry { i, j } => k.kernel_entry(i, j),
        }
    }

    pub fn holds(&self, state: &ChainState) -> bool {
        let v = self.functional_value(state);
        match self.comparison {
            Comparison::Ge => v >= self.threshold,
            Comparison::Le => v <= self.threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TailCount {
    pub n: usize,
    pub reps: usize,
    pub hits: usize,
    pub probability: f64,
    pub used: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailSlope {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub counts: Vec<TailCount>,
}

/// Minimum number of hits for an `N` to enter the regression.
pub const MIN_HITS: usize = 5;

/// Slope of `−log P̂(event)` against `N`. Scales with fewer than
/// [`MIN_HITS`] hits are dropped; each remaining point is weighted by the
/// inverse of the delta-method variance `(1 − p)/hits` of `log p̂`.
/// Replicate `r` at scale `N` uses `seed.derive(N).derive(r)`.
pub fn tail_slope(
    event: &ChainEvent,
    cfg: &NetworkConfig,
    grid: Arc<Grid>,
    ns: &[usize],
    reps: usize,
    seed: SeedSpec,
    tol: &Tolerances,
) -> Result<TailSlope> {
    cfg.validate()?;
    event.validate(cfg, grid.len())?;
    if reps == 0 {
        return Err(invalid("reps must be >= 1"));
    }
    let mut sorted = ns.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut counts = Vec::with_capacity(sorted.len());
    for &n in &sorted {
        let s = seed.derive(n as u64);
        let hits = (0..reps)
            .into_par_iter()
            .map(|r| Ok(usize::from(event.holds(&simulate_chain(cfg, n, grid.clone(), s.derive(r as u64), tol)?))))
            .collect::<Result<Vec<usize>>>()?
            .into_iter()
            .sum::<usize>();
        counts.push(TailCount { n, reps, hits, probability: hits as f64 / reps as f64, used: hits >= MIN_HITS });
    }
    let used: Vec<&TailCount> = counts.iter().filter(|c| c.used).collect();
    if used.len() < 3 {
        return Err(Error::InsufficientHits(format!(
            "{} of {} scales have >= {MIN_HITS} hits, need 3",
            used.len(),
            counts.len()
        )));
    }
    let x: Vec<f64> = used.iter().map(|c| c.n as f64).collect();
    let y: Vec<f64> = used.iter().map(|c| -c.probability.ln()).collect();
    let w: Vec<f64> = used
        .iter()
        .map(|c| c.hits as f64 / (1.0 - c.probability).max(1.0 / c.reps as f64))
        .collect();
    let fit = stats::wls(&x, &y, &w);
    Ok(TailSlope { slope: fit.slope, stderr: fit.slope_stderr, intercept: fit.intercept, counts })
}
