//! Gaussian-likelihood tilting of the covariance chain.
//!
//! With training inputs `x_1..x_P`, responses `y ∈ ℝ^{DP}` (index `μ·D + d`)
//! and precision `β`, the posterior law of the chain is the prior reweighted
//! by `exp(−Ψ/2)`, `Ψ = β yᵀ(𝟙 + βΣ)⁻¹y + log det(𝟙 + βΣ)` with
//! `Σ = [𝒦^{L+1}(x_μ, x_ν)] ⊗ 𝟙_D`. The mean-field variant multiplies the
//! quadratic term by `N`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{init_kernel, ChainState, NetworkConfig};
use crate::error::{invalid, Error, Result};
use crate::nngp::{nngp_step, NngpOptions};
use crate::operator::{Grid, KernelGrid, OperatorRep, Tolerances};
use crate::rate::{chain_rate, ChainRate, RateOptions};
use crate::rng::{normal, SeedSpec};
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSet {
    pub inputs: Vec<Vec<f64>>,
    /// One response vector in `ℝ^D` per input.
    pub responses: Vec<Vec<f64>>,
    pub beta: f64,
}

impl TrainingSet {
    pub fn new(inputs: Vec<Vec<f64>>, responses: Vec<Vec<f64>>, beta: f64) -> Result<Self> {
        let t = Self { inputs, responses, beta };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() || self.inputs.len() != self.responses.len() {
            return Err(invalid("training set needs P >= 1 inputs with one response each"));
        }
        let d = self.responses[0].len();
        if d == 0 || self.responses.iter().any(|r| r.len() != d) {
            return Err(invalid("training responses must share a positive dimension"));
        }
        let n0 = self.inputs[0].len();
        if n0 == 0 || self.inputs.iter().any(|x| x.len() != n0) {
            return Err(invalid("training inputs must share a positive dimension"));
        }
        if self.inputs.iter().chain(&self.responses).flatten().any(|v| !v.is_finite()) {
            return Err(invalid("training data must be finite"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(invalid("training beta must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.responses[0].len()
    }

    /// Stacked responses, entry `μ·D + d` is `y_μ[d]`.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(self.len() * self.output_dim(), self.responses.iter().flatten().cloned())
    }
}

/// How training inputs are located on the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputLookup {
    /// Inputs must coincide with grid nodes.
    #[default]
    GridNodes,
    /// Off-node inputs of one-dimensional grids are linearly interpolated.
    Interpolate,
}

const NODE_TOL: f64 = 1e-12;

fn locate(grid: &Grid, x: &[f64], index: usize, lookup: InputLookup) -> Result<(Vec<(usize, f64)>, bool)> {
    if let Some(i) = grid.find_node(x, NODE_TOL) {
        return Ok((vec![(i, 1.0)], false));
    }
    if lookup == InputLookup::GridNodes || grid.dim() != 1 || x.len() != 1 {
        return Err(Error::OffGrid { index });
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid.nodes()[a][0].total_cmp(&grid.nodes()[b][0]));
    let coord = |i: usize| grid.nodes()[order[i]][0];
    let t = x[0];
    if grid.len() < 2 || t < coord(0) || t > coord(order.len() - 1) {
        return Err(Error::OffGrid { index });
    }
    let k = (1..order.len()).find(|&k| coord(k) >= t).ok_or(Error::OffGrid { index })?;
    let f = (t - coord(k - 1)) / (coord(k) - coord(k - 1));
    Ok((vec![(order[k - 1], 1.0 - f), (order[k], f)], true))
}

/// `[𝒦(x_μ, x_ν)]` at the training inputs; the flag reports interpolation.
pub fn training_kernel(kernel: &KernelGrid, train: &TrainingSet, lookup: InputLookup) -> Result<(DMatrix<f64>, bool)> {
    let mut interpolated = false;
    let stencils = train
        .inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let (s, interp) = locate(&kernel.grid, x, i, lookup)?;
            interpolated |= interp;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let p = train.len();
    let kp = DMatrix::from_fn(p, p, |a, b| {
        let mut v = 0.0;
        for (i, wi) in &stencils[a] {
            for (j, wj) in &stencils[b] {
                v += wi * wj * kernel.values[(*i, *j)];
            }
        }
        v
    });
    Ok((kp, interpolated))
}

/// `K_P ⊗ 𝟙_D` in the stacking order `μ·D + d`.
pub fn kron_identity(kp: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let p = kp.nrows();
    DMatrix::from_fn(p * d, p * d, |r, c| if r % d == c % d { kp[(r / d, c / d)] } else { 0.0 })
}

#[derive(Clone, Debug)]
pub struct SigmaMatrix {
    pub matrix: DMatrix<f64>,
    pub interpolated: bool,
}

/// `Σ(𝒦) = [𝒦(x_μ, x_ν)] ⊗ 𝟙_D`.
pub fn sigma_matrix(kernel: &KernelGrid, train: &TrainingSet, d: usize, lookup: InputLookup) -> Result<SigmaMatrix> {
    if d == 0 {
        return Err(invalid("output dimension must be >= 1"));
    }
    let (kp, interpolated) = training_kernel(kernel, train, lookup)?;
    Ok(SigmaMatrix { matrix: kron_identity(&kp, d), interpolated })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Psi {
    /// `β yᵀ(𝟙 + βΣ)⁻¹y`.
    pub quad: f64,
    /// `log det(𝟙 + βΣ)`.
    pub logdet: f64,
    pub total: f64,
}

pub fn psi(sigma: &DMatrix<f64>, y: &DVector<f64>, beta: f64) -> Result<Psi> {
    let n = y.len();
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(invalid("Σ and y dimensions differ"));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(invalid("beta must be non-negative"));
    }
    let a = DMatrix::identity(n, n) + sigma * beta;
    let chol = Cholesky::new((&a + a.transpose()) * 0.5)
        .ok_or_else(|| Error::Internal("𝟙 + βΣ is not positive definite".into()))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = beta * y.dot(&chol.solve(y));
    Ok(Psi { quad, logdet, total: quad + logdet })
}

/// `Ψ_N = Ψ + (N − 1)·β yᵀ(𝟙 + βΣ)⁻¹y`.
pub fn psi_mf(sigma: &DMatrix<f64>, y: &DVector<f64>, beta: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(invalid("N must be >= 1"));
    }
    let p = psi(sigma, y, beta)?;
    Ok(p.total + (n - 1) as f64 * p.quad)
}

fn psi_of_kernel(kernel: &KernelGrid, train: &TrainingSet, lookup: InputLookup) -> Result<(Psi, bool)> {
    let s = sigma_matrix(kernel, train, train.output_dim(), lookup)?;
    Ok((psi(&s.matrix, &train.stacked(), train.beta)?, s.interpolated))
}

/// `−½Ψ(Σ(𝒦^{L+1}))`, or `−½Ψ_N` with `N = chain.n` in mean-field mode.
pub fn posterior_log_weight(chain: &ChainState, train: &TrainingSet, mean_field: bool, lookup: InputLookup) -> Result<f64> {
    let (p, _) = psi_of_kernel(&chain.last().kernel(), train, lookup)?;
    let total = if mean_field { p.total + (chain.n - 1) as f64 * p.quad } else { p.total };
    Ok(-0.5 * total)
}

#[derive(Clone, Debug)]
pub struct PosteriorEnsemble {
    pub samples: Vec<ChainState>,
    pub log_weights: Vec<f64>,
    /// Self-normalised weights, summing to one.
    pub weights: Vec<f64>,
    pub ess: f64,
    pub interpolated: bool,
    /// Indices drawn by multinomial resampling, if requested.
    pub resampled: Option<Vec<usize>>,
}

/// Self-normalised importance weights of prior chains under the likelihood.
/// Resampling draws `len(prior)` indices from `seed`.
pub fn posterior_resample(
    prior: Vec<ChainState>,
    train: &TrainingSet,
    mean_field: bool,
    lookup: InputLookup,
    resample: bool,
    seed: SeedSpec,
) -> Result<PosteriorEnsemble> {
    train.validate()?;
    if prior.is_empty() {
        return Err(invalid("posterior needs at least one prior sample"));
    }
    let parts: Vec<(f64, bool)> = prior
        .par_iter()
        .map(|c| {
            let (p, interp) = psi_of_kernel(&c.last().kernel(), train, lookup)?;
            let total = if mean_field { p.total + (c.n - 1) as f64 * p.quad } else { p.total };
            Ok((-0.5 * total, interp))
        })
        .collect::<Result<_>>()?;
    let log_weights: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let interpolated = parts.iter().any(|p| p.1);
    let lse = stats::log_sum_exp(&log_weights);
    if !lse.is_finite() {
        return Err(Error::Internal("all posterior log-weights are -inf".into()));
    }
    let weights: Vec<f64> = log_weights.iter().map(|l| (l - lse).exp()).collect();
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let resampled = resample.then(|| {
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cdf.push(acc);
        }
        let mut rng = seed.rng();
        (0..weights.len())
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                cdf.partition_point(|c| *c <= u).min(weights.len() - 1)
            })
            .collect()
    });
    Ok(PosteriorEnsemble { samples: prior, log_weights, weights, ess, interpolated, resampled })
}

#[derive(Clone, Debug, Serialize)]
pub struct MfRate {
    pub value: f64,
    pub prior_rate: ChainRate,
    pub quad: f64,
    pub i0: f64,
    /// Combined Monte-Carlo standard error of the prior rate.
    pub stderr: f64,
}

/// `Σ_ℓ m_ℓ I(K_{ℓ+1}|K_ℓ) + β yᵀ(𝟙 + βΣ(𝒦_{L+1}))⁻¹y − I₀`.
#[allow(clippy::too_many_arguments)]
pub fn mf_rate(
    ks: &[OperatorRep],
    k1: &OperatorRep,
    train: &TrainingSet,
    cfg: &NetworkConfig,
    i0: f64,
    opts: &RateOptions,
    lookup: InputLookup,
    tol: &Tolerances,
) -> Result<MfRate> {
    train.validate()?;
    let last = ks.last().ok_or_else(|| invalid("empty operator chain"))?;
    let (p, _) = psi_of_kernel(&last.kernel(), train, lookup)?;
    let prior_rate = chain_rate(ks, k1, cfg, opts, tol)?;
    let stderr = prior_rate
        .estimates
        .iter()
        .zip(&cfg.width_ratios)
        .map(|(e, m)| e.as_ref().map_or(0.0, |e| (m * e.mc_stderr).powi(2)))
        .sum::<f64>()
        .sqrt();
    Ok(MfRate { value: prior_rate.total + p.quad - i0, prior_rate, quad: p.quad, i0, stderr })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct I0Search {
    pub iterations: usize,
    pub population: usize,
    pub elite: usize,
    pub initial_sd: f64,
    /// Search stops once every coordinate sd falls below this.
    pub min_sd: f64,
    /// Add a rank-one correction at the training inputs on the last layer.
    pub rank_one: bool,
    pub nngp: NngpOptions,
    pub lookup: InputLookup,
}

impl Default for I0Search {
    fn default() -> Self {
        Self {
            iterations: 15,
            population: 24,
            elite: 6,
            initial_sd: 0.5,
            min_sd: 1e-3,
            rank_one: true,
            nngp: NngpOptions::default(),
            lookup: InputLookup::GridNodes,
        }
    }
}

impl I0Search {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.population < 2 || self.elite == 0 || self.elite > self.population {
            return Err(invalid("I0 search needs iterations >= 1, population >= 2, 1 <= elite <= population"));
        }
        if !(self.initial_sd > 0.0 && self.min_sd >= 0.0) {
            return Err(invalid("I0 search sds must be positive"));
        }
        self.nngp.validate()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct I0Estimate {
    /// Objective of the best candidate re-evaluated on fresh samples.
    pub i0_upper: f64,
    /// Objective of the best candidate on the search samples.
    pub search_value: f64,
    /// Log-scalings per layer, then the rank-one coefficient if enabled.
    pub params: Vec<f64>,
    #[serde(skip)]
    pub argmin: Vec<OperatorRep>,
    /// Best objective after each search iteration.
    pub trace: Vec<f64>,
    /// True when the iteration budget ran out before the search distribution collapsed.
    pub budget_exhausted: bool,
}

/// Candidate chains: layer `ℓ` is `b𝟙 + e^{α_ℓ}·(NNGP step without bias of layer ℓ−1)`,
/// the last layer optionally plus `γ·u⊗u` with `u = Σ_μ ȳ_μ 𝒦(·, x_μ)` scaled to unit sup-norm.
struct CandidateFamily<'a> {
    cfg: &'a NetworkConfig,
    grid: Arc<Grid>,
    k1: OperatorRep,
    train: &'a TrainingSet,
    search: &'a I0Search,
    rank_one: bool,
    tol: &'a Tolerances,
}

impl CandidateFamily<'_> {
    fn dim(&self) -> usize {
        self.cfg.depth + usize::from(self.rank_one)
    }

    fn path(&self, theta: &[f64]) -> Result<Vec<OperatorRep>> {
        let mut out = Vec::with_capacity(self.cfg.depth);
        let mut prev = self.k1.clone();
        for l in 1..=self.cfg.depth {
            let step = nngp_step(&prev, self.cfg.lambda(l), 0.0, &self.cfg.activation, &self.search.nngp, self.tol)?;
            let mut k = step.scale(theta[l - 1].exp());
            let b = self.cfg.bias(l + 1);
            if b != 0.0 {
                k = k.try_add(&OperatorRep::constant_kernel(self.grid.clone(), b))?;
            }
            if l == self.cfg.depth && self.rank_one {
                let kern = k.kernel();
                let mut u = vec![0.0; self.grid.len()];
                for (mu, x) in self.train.inputs.iter().enumerate() {
                    let j = self.grid.find_node(x, NODE_TOL).ok_or(Error::OffGrid { index: mu })?;
                    let ybar = stats::mean(&self.train.responses[mu]);
                    for (i, ui) in u.iter_mut().enumerate() {
                        *ui += ybar * kern.values[(i, j)];
                    }
                }
                let top = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if top > 0.0 {
                    u.iter_mut().for_each(|v| *v /= top);
                    let r1 = OperatorRep::rank_one(self.grid.clone(), &u)?.scale(theta[self.cfg.depth]);
                    k = k.try_add(&r1)?;
                }
            }
            out.push(k.clone());
            prev = k;
        }
        Ok(out)
    }

    fn objective(&self, path: &[OperatorRep], opts: &RateOptions) -> Result<f64> {
        let last = path.last().expect("non-empty path");
        if !last.is_nonnegative(self.tol) {
            return Ok(f64::INFINITY);
        }
        let (p, _) = psi_of_kernel(&last.kernel(), self.train, self.search.lookup)?;
        let rate = chain_rate(path, &self.k1, self.cfg, opts, self.tol)?;
        Ok(rate.total + p.quad)
    }
}

/// Upper bound on `I₀ = inf [𝓘 + β yᵀ(𝟙 + βΣ)⁻¹y]` by cross-entropy search
/// over a family of perturbed NNGP paths. All candidates share the rate
/// samples of `opts.seed`; the winner is re-evaluated with `seed`.
pub fn estimate_i0(
    cfg: &NetworkConfig,
    grid: Arc<Grid>,
    train: &TrainingSet,
    search: &I0Search,
    opts: &RateOptions,
    seed: SeedSpec,
    tol: &Tolerances,
) -> Result<I0Estimate> {
    cfg.validate()?;
    cfg.activation.require_subquadratic()?;
    train.validate()?;
    search.validate()?;
    opts.validate()?;
    if search.lookup == InputLookup::GridNodes {
        for (i, x) in train.inputs.iter().enumerate() {
            grid.find_node(x, NODE_TOL).ok_or(Error::OffGrid { index: i })?;
        }
    }
    let rank_one = search.rank_one && train.responses.iter().flatten().any(|v| *v != 0.0) && search.lookup == InputLookup::GridNodes;
    let k1 = init_kernel(grid.clone(), cfg.lambda(0), cfg.bias(1))?;
    let family = CandidateFamily { cfg, grid, k1, train, search, rank_one, tol };
    let dim = family.dim();
    let mut mean = vec![0.0; dim];
    let mut sd = vec![search.initial_sd; dim];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut trace = Vec::with_capacity(search.iterations);
    let mut collapsed = false;
    for it in 0..search.iterations {
        let mut rng = seed.derive(it as u64).rng();
        let mut thetas = vec![mean.clone()];
        while thetas.len() < search.population {
            thetas.push((0..dim).map(|k| mean[k] + sd[k] * normal(&mut rng)).collect());
        }
        let scores: Vec<f64> = thetas
            .par_iter()
            .map(|t| family.objective(&family.path(t)?, opts))
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..thetas.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let top = order[0];
        if best.as_ref().is_none_or(|b| scores[top] < b.0) {
            best = Some((scores[top], thetas[top].clone()));
        }
        trace.push(best.as_ref().unwrap().0);
        let elite: Vec<&Vec<f64>> = order.iter().take(search.elite).filter(|&&i| scores[i].is_finite()).map(|&i| &thetas[i]).collect();
        if elite.is_empty() {
            continue;
        }
        for k in 0..dim {
            let vals: Vec<f64> = elite.iter().map(|t| t[k]).collect();
            mean[k] = stats::mean(&vals);
            sd[k] = if vals.len() > 1 { stats::variance(&vals).sqrt() } else { sd[k] * 0.5 };
        }
        if sd.iter().all(|s| *s < search.min_sd) {
            collapsed = true;
            break;
        }
    }
    let (search_value, params) = best.ok_or_else(|| Error::Internal("no candidate evaluated".into()))?;
    let argmin = family.path(&params)?;
    let fresh_opts = RateOptions { seed: seed.derive(u64::MAX), ..*opts };
    let i0_upper = family.objective(&argmin, &fresh_opts)?;
    Ok(I0Estimate { i0_upper, search_value, params, argmin, trace, budget_exhausted: !collapsed })
}
