//! The covariance Markov chain `K¹ → K² → … → K^{L+1}` of a fully connected
//! Gaussian network, and the raw weight recursion it summarises.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{activate_sym, ActivationSpec, FieldSampler, SAMPLE_BLOCK};
use crate::operator::{Grid, KernelGrid, OperatorRep, Tolerances};
use crate::rng::{fill_normals, SeedSpec};

/// Architecture and prior of an `L`-hidden-layer network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of hidden layers `L`.
    pub depth: usize,
    /// Input dimension `N₀`.
    pub input_dim: usize,
    /// Width ratios `m_1..m_L`; layer `ℓ` has `⌊m_ℓ N⌋` units.
    pub width_ratios: Vec<f64>,
    /// Precisions `λ_0..λ_L`.
    pub lambdas: Vec<f64>,
    /// Bias variances `b_1..b_{L+1}`; empty means all zero.
    #[serde(default)]
    pub biases: Vec<f64>,
    pub activation: ActivationSpec,
    /// Output dimension `D`.
    #[serde(default = "one")]
    pub output_dim: usize,
}

fn one() -> usize {
    1
}

impl NetworkConfig {
    /// Config with unit precisions, unit width ratios and no biases.
    pub fn simple(depth: usize, input_dim: usize, activation: ActivationSpec) -> Self {
        Self {
            depth,
            input_dim,
            width_ratios: vec![1.0; depth],
            lambdas: vec![1.0; depth + 1],
            biases: Vec::new(),
            activation,
            output_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.depth;
        if l == 0 {
            return Err(invalid("network.depth must be >= 1"));
        }
        if self.input_dim == 0 {
            return Err(invalid("network.input_dim must be >= 1"));
        }
        if self.output_dim == 0 {
            return Err(invalid("network.output_dim must be >= 1"));
        }
        if self.width_ratios.len() != l {
            return Err(invalid(format!("network.width_ratios needs {l} entries, got {}", self.width_ratios.len())));
        }
        if self.lambdas.len() != l + 1 {
            return Err(invalid(format!("network.lambdas needs {} entries, got {}", l + 1, self.lambdas.len())));
        }
        if !self.biases.is_empty() && self.biases.len() != l + 1 {
            return Err(invalid(format!("network.biases needs {} entries, got {}", l + 1, self.biases.len())));
        }
        if let Some(m) = self.width_ratios.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(invalid(format!("network.width_ratios entry {m} must be positive")));
        }
        if let Some(v) = self.lambdas.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(invalid(format!("network.lambdas entry {v} must be positive")));
        }
        if let Some(b) = self.biases.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(invalid(format!("network.biases entry {b} must be non-negative")));
        }
        Ok(())
    }

    /// `⌊m_ℓ N⌋`, at least 1, for `ℓ = 1..L`.
    pub fn widths(&self, n: usize) -> Vec<usize> {
        self.width_ratios.iter().map(|m| ((m * n as f64).floor() as usize).max(1)).collect()
    }

    /// `λ_ℓ` for `ℓ = 0..L`.
    pub fn lambda(&self, layer: usize) -> f64 {
        self.lambdas[layer]
    }

    /// `b_ℓ` for `ℓ = 1..L+1`.
    pub fn bias(&self, layer: usize) -> f64 {
        self.biases.get(layer - 1).copied().unwrap_or(0.0)
    }
}

/// One realisation of `(K², …, K^{L+1})`.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub initial: OperatorRep,
    /// `operators[i]` is `K^{i+2}`.
    pub operators: Vec<OperatorRep>,
    pub config: NetworkConfig,
    /// Width scale `N`.
    pub n: usize,
    pub seed: SeedSpec,
}

impl ChainState {
    pub fn last(&self) -> &OperatorRep {
        self.operators.last().expect("chain has at least one layer")
    }

    /// `K^ℓ` for `ℓ = 1..L+1`.
    pub fn layer(&self, l: usize) -> Option<&OperatorRep> {
        match l {
            0 => None,
            1 => Some(&self.initial),
            _ => self.operators.get(l - 2),
        }
    }

    pub fn kernels(&self) -> Vec<KernelGrid> {
        self.operators.iter().map(OperatorRep::kernel).collect()
    }
}

/// `𝒦¹(x, x') = b₁ + ⟨x, x'⟩/(λ₀ N₀)` on the grid nodes.
pub fn init_kernel(grid: Arc<Grid>, lambda0: f64, b1: f64) -> Result<OperatorRep> {
    if !(lambda0.is_finite() && lambda0 > 0.0) {
        return Err(invalid(format!("lambda0 = {lambda0} must be positive")));
    }
    if !(b1.is_finite() && b1 >= 0.0) {
        return Err(invalid(format!("b1 = {b1} must be non-negative")));
    }
    let n0 = grid.dim() as f64;
    let k = KernelGrid::from_fn(grid, |x, y| {
        b1 + x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / (lambda0 * n0)
    });
    let sw = k.grid.sqrt_weights();
    let n = k.grid.len();
    let sym = DMatrix::from_fn(n, n, |i, j| sw[i] * k.values[(i, j)] * sw[j]);
    OperatorRep::from_sym(k.grid.clone(), sym)
}

/// `s_i = √w ⊙ σ(h_i)` for `width` fields `h_i ~ 𝒩_H(0, K)`, as rows.
pub(crate) fn activated_fields(
    sampler: &FieldSampler,
    act: &ActivationSpec,
    count: usize,
    seed: SeedSpec,
) -> DMatrix<f64> {
    let mut s = sampler.sample_sym(count, seed);
    activate_sym(act, sampler.grid().sqrt_weights(), &mut s);
    s
}

/// Gram matrix `Σ_i s_i s_iᵀ` of the rows, accumulated per block in order.
pub(crate) fn gram_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.ncols();
    let m = s.nrows();
    let parts: Vec<DMatrix<f64>> = (0..m.div_ceil(SAMPLE_BLOCK))
        .into_par_iter()
        .map(|b| {
            let rows = SAMPLE_BLOCK.min(m - b * SAMPLE_BLOCK);
            let blk = s.rows(b * SAMPLE_BLOCK, rows);
            blk.tr_mul(&blk)
        })
        .collect();
    parts.into_iter().fold(DMatrix::zeros(n, n), |acc, p| acc + p)
}

/// One transition `K ↦ b𝟙 + (1/(λ·width)) Σ_{i≤width} C_{h_i}`.
pub fn chain_step(
    k: &OperatorRep,
    width: usize,
    lambda: f64,
    b: f64,
    act: &ActivationSpec,
    seed: SeedSpec,
    tol: &Tolerances,
) -> Result<OperatorRep> {
    if width == 0 {
        return Err(invalid("layer width must be >= 1"));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(invalid(format!("lambda = {lambda} must be positive")));
    }
    let sampler = FieldSampler::new(k, tol)?;
    let s = activated_fields(&sampler, act, width, seed);
    let mut sym = gram_rows(&s) / (lambda * width as f64);
    if b != 0.0 {
        let sw = k.grid().sqrt_weights();
        let n = sw.len();
        sym += DMatrix::from_fn(n, n, |i, j| b * sw[i] * sw[j]);
    }
    OperatorRep::from_sym(k.grid().clone(), sym)
}

/// Full chain at width scale `N`. Layer `ℓ` draws from `seed.derive(ℓ)`.
pub fn simulate_chain(cfg: &NetworkConfig, n: usize, grid: Arc<Grid>, seed: SeedSpec, tol: &Tolerances) -> Result<ChainState> {
    cfg.validate()?;
    if n == 0 {
        return Err(invalid("width scale N must be >= 1"));
    }
    if grid.dim() != cfg.input_dim {
        return Err(invalid(format!("grid dimension {} differs from input_dim {}", grid.dim(), cfg.input_dim)));
    }
    let initial = init_kernel(grid, cfg.lambda(0), cfg.bias(1))?;
    let widths = cfg.widths(n);
    let mut operators = Vec::with_capacity(cfg.depth);
    let mut current = initial.clone();
    for l in 1..=cfg.depth {
        current = chain_step(&current, widths[l - 1], cfg.lambda(l), cfg.bias(l + 1), &cfg.activation, seed.derive(l as u64), tol)?;
        operators.push(current.clone());
    }
    Ok(ChainState { initial, operators, config: cfg.clone(), n, seed })
}

/// Independent replicates `r = 0..reps` with seeds `seed.derive(r)`, in order.
pub fn simulate_replicates(
    cfg: &NetworkConfig,
    n: usize,
    grid: &Arc<Grid>,
    reps: usize,
    seed: SeedSpec,
    tol: &Tolerances,
) -> Result<Vec<ChainState>> {
    (0..reps)
        .into_par_iter()
        .map(|r| simulate_chain(cfg, n, grid.clone(), seed.derive(r as u64), tol))
        .collect()
}

/// Raw weight recursion: `M × P` matrix of the first `M` output units at
/// `P` inputs. Weights of layer `ℓ` are `𝒩(0, 1/(λ_ℓ N_ℓ))`, biases `𝒩(0, b_ℓ)`.
pub fn simulate_network_outputs(
    cfg: &NetworkConfig,
    n: usize,
    inputs: &[Vec<f64>],
    m: usize,
    seed: SeedSpec,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if n == 0 || inputs.is_empty() {
        return Err(invalid("need N >= 1 and at least one input"));
    }
    if m == 0 || m > cfg.output_dim {
        return Err(invalid(format!("output copies M = {m} must lie in 1..={}", cfg.output_dim)));
    }
    if inputs.iter().any(|x| x.len() != cfg.input_dim) {
        return Err(invalid("input dimension mismatch"));
    }
    let p = inputs.len();
    let mut rng = seed.rng();
    // activations of the previous layer, fan_in × P
    let mut prev = DMatrix::from_fn(cfg.input_dim, p, |i, mu| inputs[mu][i]);
    let fan_outs = cfg.widths(n).into_iter().chain(std::iter::once(m));
    for (l, fan_out) in fan_outs.enumerate() {
        let fan_in = prev.nrows();
        let sd = 1.0 / (cfg.lambda(l) * fan_in as f64).sqrt();
        let mut w = vec![0.0; fan_out * fan_in];
        fill_normals(&mut rng, &mut w);
        let w = DMatrix::from_vec(fan_out, fan_in, w) * sd;
        let mut h = w * &prev;
        let b = cfg.bias(l + 1);
        if b > 0.0 {
            let mut bias = vec![0.0; fan_out];
            fill_normals(&mut rng, &mut bias);
            for (i, z) in bias.iter().enumerate() {
                h.row_mut(i).add_scalar_mut(b.sqrt() * z);
            }
        }
        if l == cfg.depth {
            return Ok(h);
        }
        prev = h.map(|v| cfg.activation.apply(v));
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{make_grid, BoxDomain, QuadratureRule};

    fn point(x: f64) -> Arc<Grid> {
        Arc::new(Grid::new(vec![vec![x]], vec![1.0]).unwrap())
    }

    #[test]
    fn init_kernel_values() {
        let k = init_kernel(point(1.5), 1.0, 0.0).unwrap();
        assert!((k.kernel_entry(0, 0) - 2.25).abs() < 1e-15);
        let k = init_kernel(point(0.0), 1.0, 0.0).unwrap();
        assert_eq!(k.kernel_entry(0, 0), 0.0);
        let k = init_kernel(point(0.0), 1.0, 2.0).unwrap();
        assert_eq!(k.kernel_entry(0, 0), 2.0);
        assert!(init_kernel(point(0.0), 0.0, 0.0).is_err());
    }

    #[test]
    fn chain_step_trivial_cases() {
        let tol = Tolerances::default();
        let g = Arc::new(make_grid(&BoxDomain::interval(0.0, 1.0).unwrap(), 4, QuadratureRule::GaussLegendre).unwrap());
        let z = OperatorRep::zero(g.clone());
        let out = chain_step(&z, 10, 1.0, 0.0, &ActivationSpec::tanh(), SeedSpec::new(1), &tol).unwrap();
        assert_eq!(out.sym().amax(), 0.0);
        let out = chain_step(&z, 10, 1.0, 5.0, &ActivationSpec::relu(), SeedSpec::new(1), &tol).unwrap();
        let k = out.kernel();
        assert!(k.values.iter().all(|v| (v - 5.0).abs() < 1e-13));
        assert!(chain_step(&z, 0, 1.0, 0.0, &ActivationSpec::relu(), SeedSpec::new(1), &tol).is_err());
    }

    #[test]
    fn chi_square_mean() {
        let tol = Tolerances::default();
        let k = OperatorRep::scaled_identity(point(0.0), 1.7);
        let width = 5;
        let reps = 100_000;
        let vals: Vec<f64> = (0..reps)
            .map(|r| {
                chain_step(&k, width, 1.0, 0.0, &ActivationSpec::identity(), SeedSpec::with_stream(2, r), &tol)
                    .unwrap()
                    .trace()
            })
            .collect();
        let m = crate::stats::mean(&vals);
        // Var = k² · 2/width
        let se = 1.7 * (2.0 / width as f64 / reps as f64).sqrt();
        assert!((m - 1.7).abs() < 3.0 * se, "mean {m}");
    }

    #[test]
    fn deterministic_chain() {
        let tol = Tolerances::default();
        let g = Arc::new(make_grid(&BoxDomain::interval(0.0, 1.0).unwrap(), 5, QuadratureRule::GaussLegendre).unwrap());
        let cfg = NetworkConfig::simple(2, 1, ActivationSpec::relu());
        let a = simulate_chain(&cfg, 30, g.clone(), SeedSpec::new(4), &tol).unwrap();
        let b = simulate_chain(&cfg, 30, g, SeedSpec::new(4), &tol).unwrap();
        for (x, y) in a.operators.iter().zip(&b.operators) {
            assert_eq!(x.sym(), y.sym());
        }
        assert_eq!(a.operators.len(), 2);
    }

    #[test]
    fn identity_chain_concentrates() {
        let tol = Tolerances::default();
        let cfg = NetworkConfig::simple(3, 1, ActivationSpec::identity());
        let s = simulate_chain(&cfg, 10_000, point(0.8), SeedSpec::new(8), &tol).unwrap();
        // product of three averages of χ²/N, sd ≈ √(3·2/N)
        assert!((s.last().trace() / 0.64 - 1.0).abs() < 4.0 * (6.0f64 / 10_000.0).sqrt());
    }

    #[test]
    fn widths_floor_min_one() {
        let mut cfg = NetworkConfig::simple(2, 1, ActivationSpec::relu());
        cfg.width_ratios = vec![0.5, 0.001];
        assert_eq!(cfg.widths(9), vec![4, 1]);
    }

    #[test]
    fn raw_outputs() {
        let cfg = NetworkConfig::simple(1, 1, ActivationSpec::identity());
        let out = simulate_network_outputs(&cfg, 8, &[vec![0.0], vec![1.0], vec![1.0]], 1, SeedSpec::new(1)).unwrap();
        assert_eq!(out[(0, 0)], 0.0);
        assert_eq!(out[(0, 1)], out[(0, 2)]);
        let reps = 40_000;
        let x = 1.3;
        let vals: Vec<f64> = (0..reps)
            .map(|r| simulate_network_outputs(&cfg, 4, &[vec![x]], 1, SeedSpec::with_stream(3, r)).unwrap()[(0, 0)])
            .collect();
        let v = vals.iter().map(|a| a * a).sum::<f64>() / reps as f64;
        // output is √(x² χ²_4/4)·Z: variance x², fourth moment 3x⁴(1 + 2/4)
        let se = (3.0 * x.powi(4) * 1.5 - x.powi(4)).sqrt() / (reps as f64).sqrt();
        assert!((v - x * x).abs() < 4.0 * se, "variance {v}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetworkConfig::simple(2, 1, ActivationSpec::relu());
        assert!(cfg.validate().is_ok());
        cfg.lambdas = vec![1.0];
        assert!(cfg.validate().is_err());
        let e = serde_json::from_str::<NetworkConfig>(r#"{"depth":1,"input_dim":1,"width_ratios":[1],"activation":{"kind":"relu"}}"#)
            .unwrap_err();
        assert!(e.to_string().contains("lambdas"));
    }
}
