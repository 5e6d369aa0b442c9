//! Grid discretisation of the input set and the algebra of symmetric
//! trace-class operators on `L²` of that set.
//!
//! A kernel `k` sampled on quadrature nodes `x_i` with weights `w_i` is stored
//! as the similarity-symmetrised matrix `S = diag(√w)·k·diag(√w)`. Spectral
//! quantities of `S` approximate those of the integral operator, so traces and
//! the trace / Hilbert–Schmidt / operator norms are plain symmetric-matrix
//! computations.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quadrature::gauss_legendre;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    GaussLegendre,
    Trapezoid,
}

/// Axis-aligned box `[lower_1, upper_1] × … × [lower_d, upper_d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn interval(a: f64, b: f64) -> Result<Self> {
        Self::new(vec![a], vec![b])
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(invalid("box bounds must be non-empty and of equal dimension"));
        }
        for (a, b) in self.lower.iter().zip(&self.upper) {
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(invalid(format!("degenerate box side [{a}, {b}]")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(a, b)| b - a).product()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GridData {
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Quadrature nodes and weights representing the input set and the inner
/// product of `L²` on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridData", into = "GridData")]
pub struct Grid {
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
    sqrt_weights: Vec<f64>,
}

impl TryFrom<GridData> for Grid {
    type Error = Error;
    fn try_from(d: GridData) -> Result<Self> {
        Grid::new(d.nodes, d.weights)
    }
}

impl From<Grid> for GridData {
    fn from(g: Grid) -> Self {
        GridData { nodes: g.nodes, weights: g.weights }
    }
}

impl Grid {
    pub fn new(nodes: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(invalid("grid needs at least one node"));
        }
        if nodes.len() != weights.len() {
            return Err(invalid(format!(
                "{} nodes but {} weights",
                nodes.len(),
                weights.len()
            )));
        }
        let dim = nodes[0].len();
        if dim == 0 || nodes.iter().any(|x| x.len() != dim) {
            return Err(invalid("grid nodes must share a positive dimension"));
        }
        if nodes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("grid nodes must be finite"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(invalid(format!("quadrature weight {w} is not strictly positive")));
        }
        for i in 0..nodes.len() {
            for j in 0..i {
                if nodes[i] == nodes[j] {
                    return Err(invalid(format!("grid nodes {j} and {i} coincide")));
                }
            }
        }
        let sqrt_weights = weights.iter().map(|w| w.sqrt()).collect();
        Ok(Self { nodes, weights, sqrt_weights })
    }

    /// A grid on the given points, each carrying the same weight.
    pub fn from_points(points: Vec<Vec<f64>>, weight: f64) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![weight; n])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].len()
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sqrt_weights(&self) -> &[f64] {
        &self.sqrt_weights
    }

    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Index of the node equal to `x` (componentwise within `tol`).
    pub fn find_node(&self, x: &[f64], tol: f64) -> Option<usize> {
        self.nodes.iter().position(|node| {
            node.len() == x.len() && node.iter().zip(x).all(|(a, b)| (a - b).abs() <= tol)
        })
    }

    /// `L²` inner product of two functions sampled on the nodes.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.weights.iter().zip(f).zip(g).map(|((w, a), b)| w * a * b).sum()
    }
}

fn axis_rule(a: f64, b: f64, n: usize, rule: QuadratureRule) -> Result<(Vec<f64>, Vec<f64>)> {
    match rule {
        QuadratureRule::GaussLegendre => {
            let (x, w) = gauss_legendre(n);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            Ok((
                x.iter().map(|t| mid + half * t).collect(),
                w.iter().map(|v| v * half).collect(),
            ))
        }
        QuadratureRule::Trapezoid => {
            if n < 2 {
                return Err(invalid("trapezoid rule needs n >= 2"));
            }
            let h = (b - a) / (n - 1) as f64;
            let x = (0..n).map(|i| a + h * i as f64).collect();
            let w = (0..n)
                .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
                .collect();
            Ok((x, w))
        }
    }
}

/// Tensor-product quadrature grid with `n` nodes per axis (last axis fastest).
pub fn make_grid(domain: &BoxDomain, n: usize, rule: QuadratureRule) -> Result<Grid> {
    domain.validate()?;
    if n == 0 {
        return Err(invalid("grid size must be positive"));
    }
    let axes = domain
        .lower
        .iter()
        .zip(&domain.upper)
        .map(|(a, b)| axis_rule(*a, *b, n, rule))
        .collect::<Result<Vec<_>>>()?;
    let mut nodes = vec![Vec::new()];
    let mut weights = vec![1.0];
    for (ax, aw) in &axes {
        let mut next_nodes = Vec::with_capacity(nodes.len() * ax.len());
        let mut next_weights = Vec::with_capacity(nodes.len() * ax.len());
        for (node, w) in nodes.iter().zip(&weights) {
            for (x, v) in ax.iter().zip(aw) {
                let mut p = node.clone();
                p.push(*x);
                next_nodes.push(p);
                next_weights.push(w * v);
            }
        }
        nodes = next_nodes;
        weights = next_weights;
    }
    Grid::new(nodes, weights)
}

/// Numerical tolerances shared by the operator routines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Eigenvalues in `[-psd_tol, 0)` count as zero; below is an error.
    pub psd_tol: f64,
    /// Relative asymmetry allowed in kernel matrices.
    pub sym_tol: f64,
    /// Value that clipped negative eigenvalues are replaced with.
    pub eig_clip: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { psd_tol: 1e-10, sym_tol: 1e-12, eig_clip: 0.0 }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("psd_tol", self.psd_tol), ("sym_tol", self.sym_tol), ("eig_clip", self.eig_clip)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("tolerance {name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Kernel values `k(x_i, x_j)` on a grid.
#[derive(Clone, Debug)]
pub struct KernelGrid {
    pub grid: Arc<Grid>,
    pub values: DMatrix<f64>,
}

impl KernelGrid {
    pub fn new(grid: Arc<Grid>, values: DMatrix<f64>) -> Result<Self> {
        let n = grid.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(invalid(format!(
                "kernel matrix is {}x{}, grid has {n} nodes",
                values.nrows(),
                values.ncols()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn<F: Fn(&[f64], &[f64]) -> f64>(grid: Arc<Grid>, k: F) -> Self {
        let n = grid.len();
        let nodes = grid.nodes();
        let values = DMatrix::from_fn(n, n, |i, j| k(&nodes[i], &nodes[j]));
        Self { grid, values }
    }

    /// Largest entrywise asymmetry relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.values.amax().max(f64::MIN_POSITIVE);
        let n = self.values.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.values[(i, j)] - self.values[(j, i)]).abs());
            }
        }
        worst / scale
    }

    pub fn sup_distance(&self, other: &KernelGrid) -> f64 {
        (&self.values - &other.values).amax()
    }
}

/// Eigen-decomposition of a symmetric representation, eigenvalues descending.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl Spectrum {
    fn of(sym: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(sym.clone());
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
        Self { values, vectors }
    }

    /// `V·diag(f(λ))·Vᵀ`, symmetrised.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (c, lambda) in self.values.iter().enumerate() {
            let s = f(*lambda);
            scaled.column_mut(c).scale_mut(s);
        }
        symmetrize(&(&scaled * self.vectors.transpose()))
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric operator on `L²(grid)` in symmetrised-matrix form.
#[derive(Clone, Debug)]
pub struct OperatorRep {
    grid: Arc<Grid>,
    sym: DMatrix<f64>,
    spectrum: OnceLock<Arc<Spectrum>>,
}

impl OperatorRep {
    /// Wrap a symmetric representation; the matrix is symmetrised exactly.
    pub fn from_sym(grid: Arc<Grid>, sym: DMatrix<f64>) -> Result<Self> {
        let n = grid.len();
        if sym.nrows() != n || sym.ncols() != n {
            return Err(invalid(format!(
                "operator matrix is {}x{}, grid has {n} nodes",
                sym.nrows(),
                sym.ncols()
            )));
        }
        Ok(Self::from_sym_unchecked(grid, symmetrize(&sym)))
    }

    pub(crate) fn from_sym_unchecked(grid: Arc<Grid>, sym: DMatrix<f64>) -> Self {
        Self { grid, sym, spectrum: OnceLock::new() }
    }

    pub fn zero(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        Self::from_sym_unchecked(grid, DMatrix::zeros(n, n))
    }

    /// `c·I` on `L²(grid)`.
    pub fn scaled_identity(grid: Arc<Grid>, c: f64) -> Self {
        let n = grid.len();
        Self::from_sym_unchecked(grid, DMatrix::identity(n, n) * c)
    }

    /// Operator of the constant kernel `k ≡ b`, i.e. `g ↦ b·(1, g)`.
    pub fn constant_kernel(grid: Arc<Grid>, b: f64) -> Self {
        let sw = grid.sqrt_weights();
        let n = grid.len();
        let sym = DMatrix::from_fn(n, n, |i, j| b * sw[i] * sw[j]);
        Self::from_sym_unchecked(grid, sym)
    }

    /// Operator of the rank-one kernel `f(x)f(y)`.
    pub fn rank_one(grid: Arc<Grid>, f: &[f64]) -> Result<Self> {
        if f.len() != grid.len() {
            return Err(invalid("function length does not match grid"));
        }
        let sw = grid.sqrt_weights();
        let s: Vec<f64> = f.iter().zip(sw).map(|(v, w)| v * w).collect();
        let n = s.len();
        let sym = DMatrix::from_fn(n, n, |i, j| s[i] * s[j]);
        Ok(Self::from_sym_unchecked(grid, sym))
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn sym(&self) -> &DMatrix<f64> {
        &self.sym
    }

    pub fn into_sym(self) -> DMatrix<f64> {
        self.sym
    }

    pub fn len(&self) -> usize {
        self.sym.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.sym.nrows() == 0
    }

    pub fn spectrum(&self) -> &Spectrum {
        self.spectrum.get_or_init(|| Arc::new(Spectrum::of(&self.sym)))
    }

    /// Eigenvalues below `n·ε·‖K‖` are indistinguishable from zero.
    pub fn round_off_floor(&self) -> f64 {
        self.len() as f64 * f64::EPSILON * self.op_norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.spectrum().values.last().copied().unwrap_or(0.0)
    }

    pub fn is_nonnegative(&self, tol: &Tolerances) -> bool {
        self.min_eigenvalue() >= -tol.psd_tol
    }

    pub fn check_psd(&self, tol: &Tolerances) -> Result<()> {
        let m = self.min_eigenvalue();
        if m < -tol.psd_tol {
            return Err(Error::NotPsd { min_eigenvalue: m, tolerance: tol.psd_tol });
        }
        Ok(())
    }

    /// Kernel values `S_ij / (√w_i √w_j)`.
    pub fn kernel(&self) -> KernelGrid {
        let sw = self.grid.sqrt_weights();
        let n = self.len();
        let values = DMatrix::from_fn(n, n, |i, j| self.sym[(i, j)] / (sw[i] * sw[j]));
        KernelGrid { grid: self.grid.clone(), values }
    }

    pub fn kernel_entry(&self, i: usize, j: usize) -> f64 {
        let sw = self.grid.sqrt_weights();
        self.sym[(i, j)] / (sw[i] * sw[j])
    }

    fn same_grid(&self, other: &OperatorRep) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn try_sub(&self, other: &OperatorRep) -> Result<OperatorRep> {
        self.same_grid(other)?;
        Ok(Self::from_sym_unchecked(self.grid.clone(), &self.sym - &other.sym))
    }

    pub fn try_add(&self, other: &OperatorRep) -> Result<OperatorRep> {
        self.same_grid(other)?;
        Ok(Self::from_sym_unchecked(self.grid.clone(), &self.sym + &other.sym))
    }

    pub fn scale(&self, c: f64) -> OperatorRep {
        Self::from_sym_unchecked(self.grid.clone(), &self.sym * c)
    }

    pub fn trace(&self) -> f64 {
        self.sym.trace()
    }

    pub fn trace_norm(&self) -> f64 {
        self.spectrum().values.iter().map(|v| v.abs()).sum()
    }

    pub fn hs_norm(&self) -> f64 {
        self.spectrum().values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn op_norm(&self) -> f64 {
        self.spectrum().values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// `φ(k)`: the integral operator of a kernel sampled on the grid.
pub fn kernel_to_operator(k: &KernelGrid, tol: &Tolerances) -> Result<OperatorRep> {
    let asym = k.asymmetry();
    if asym > tol.sym_tol {
        return Err(Error::InvalidKernel(format!(
            "kernel asymmetry {asym:e} exceeds {:e}",
            tol.sym_tol
        )));
    }
    if k.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidKernel("non-finite kernel value".into()));
    }
    let sw = k.grid.sqrt_weights();
    let n = k.grid.len();
    let sym = DMatrix::from_fn(n, n, |i, j| sw[i] * k.values[(i, j)] * sw[j]);
    Ok(OperatorRep::from_sym_unchecked(k.grid.clone(), symmetrize(&sym)))
}

pub fn trace(k: &OperatorRep) -> f64 {
    k.trace()
}

pub fn trace_norm(k: &OperatorRep) -> f64 {
    k.trace_norm()
}

pub fn hs_norm(k: &OperatorRep) -> f64 {
    k.hs_norm()
}

pub fn op_norm(k: &OperatorRep) -> f64 {
    k.op_norm()
}

/// Non-negative square root; eigenvalues in `[-psd_tol, 0)` are clipped.
pub fn sqrt_op(k: &OperatorRep, tol: &Tolerances) -> Result<OperatorRep> {
    k.check_psd(tol)?;
    let clip = tol.eig_clip;
    let floor = k.round_off_floor();
    let root = k.spectrum().map(|l| if l < 0.0 { clip.sqrt() } else if l <= floor { 0.0 } else { l.sqrt() });
    Ok(OperatorRep::from_sym_unchecked(k.grid.clone(), root))
}

/// Both sides of `‖√K − √K'‖₂² ≤ ‖K − K'‖₁`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowersStormer {
    pub lhs: f64,
    pub rhs: f64,
}

pub fn powers_stormer_gap(k: &OperatorRep, k2: &OperatorRep, tol: &Tolerances) -> Result<PowersStormer> {
    let a = sqrt_op(k, tol)?;
    let b = sqrt_op(k2, tol)?;
    let lhs = a.try_sub(&b)?.hs_norm().powi(2);
    let rhs = k.try_sub(k2)?.trace_norm();
    Ok(PowersStormer { lhs, rhs })
}

/// Both sides of the trace-corrected variant
/// `‖√K − √K'‖₂ ≤ |tr K − tr K'|^{1/2} + √2·‖K − K'‖₂^{1/4}·min(tr √K, tr √K')^{1/2}`.
pub fn powers_stormer_variant(k: &OperatorRep, k2: &OperatorRep, tol: &Tolerances) -> Result<PowersStormer> {
    let a = sqrt_op(k, tol)?;
    let b = sqrt_op(k2, tol)?;
    let lhs = a.try_sub(&b)?.hs_norm();
    let diff = k.try_sub(k2)?;
    let rhs = (k.trace() - k2.trace()).abs().sqrt()
        + std::f64::consts::SQRT_2 * diff.hs_norm().powf(0.25) * a.trace().min(b.trace()).max(0.0).sqrt();
    Ok(PowersStormer { lhs, rhs })
}

/// The four distances whose joint vanishing characterises trace-norm convergence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EquivMetrics {
    pub d_sqrt_hs: f64,
    pub d_tr: f64,
    pub d_hs: f64,
    pub d_trace_gap: f64,
}

pub fn equiv_metrics(kn: &OperatorRep, k: &OperatorRep, tol: &Tolerances) -> Result<EquivMetrics> {
    let diff = kn.try_sub(k)?;
    let d_sqrt_hs = sqrt_op(kn, tol)?.try_sub(&sqrt_op(k, tol)?)?.hs_norm();
    Ok(EquivMetrics {
        d_sqrt_hs,
        d_tr: diff.trace_norm(),
        d_hs: diff.hs_norm(),
        d_trace_gap: (kn.trace() - k.trace()).abs(),
    })
}

/// Nearest (in Hilbert–Schmidt norm) non-negative operator: negative
/// eigenvalues are replaced by `eig_clip`. PSD inputs come back unchanged.
pub fn psd_project(grid: Arc<Grid>, m: &DMatrix<f64>, tol: &Tolerances) -> Result<OperatorRep> {
    let op = OperatorRep::from_sym(grid, m.clone())?;
    Ok(project_operator(op, tol))
}

pub(crate) fn project_operator(op: OperatorRep, tol: &Tolerances) -> OperatorRep {
    if op.min_eigenvalue() >= 0.0 {
        return op;
    }
    let clip = tol.eig_clip;
    let sym = op.spectrum().map(|l| l.max(clip));
    OperatorRep::from_sym_unchecked(op.grid.clone(), sym)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize) -> Arc<Grid> {
        Arc::new(make_grid(&BoxDomain::interval(0.0, 1.0).unwrap(), n, QuadratureRule::GaussLegendre).unwrap())
    }

    fn point_grid() -> Arc<Grid> {
        Arc::new(Grid::new(vec![vec![0.5]], vec![1.0]).unwrap())
    }

    fn diag_op(vals: &[f64]) -> OperatorRep {
        let n = vals.len();
        let grid = Arc::new(Grid::from_points((0..n).map(|i| vec![i as f64]).collect(), 1.0).unwrap());
        OperatorRep::from_sym(grid, DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(vals))).unwrap()
    }

    #[test]
    fn one_point_gauss_grid() {
        let g = make_grid(&BoxDomain::interval(0.0, 1.0).unwrap(), 1, QuadratureRule::GaussLegendre).unwrap();
        assert_eq!(g.nodes(), &[vec![0.5]]);
        assert!((g.weights()[0] - 1.0).abs() < 1e-15);
        assert!(make_grid(&BoxDomain::interval(0.0, 1.0).unwrap(), 1, QuadratureRule::Trapezoid).is_err());
    }

    #[test]
    fn two_point_gauss_grid() {
        let g = make_grid(&BoxDomain::interval(0.0, 1.0).unwrap(), 2, QuadratureRule::GaussLegendre).unwrap();
        let d = 1.0 / (2.0 * 3f64.sqrt());
        assert!((g.nodes()[0][0] - (0.5 - d)).abs() < 1e-15);
        assert!((g.nodes()[1][0] - (0.5 + d)).abs() < 1e-15);
        assert!((g.weights()[0] - 0.5).abs() < 1e-15 && (g.weights()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_weights_sum_to_length() {
        let g = make_grid(&BoxDomain::interval(0.0, 2.0).unwrap(), 4, QuadratureRule::Trapezoid).unwrap();
        assert!((g.measure() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn box_grid_volume_and_exactness() {
        let dom = BoxDomain::new(vec![0.0, -1.0], vec![2.0, 1.0]).unwrap();
        let g = make_grid(&dom, 3, QuadratureRule::GaussLegendre).unwrap();
        assert_eq!(g.len(), 9);
        assert!((g.measure() - 4.0).abs() < 1e-13);
        // ∫∫ x^5 y^4 = (2^6/6)(2/5)
        let v: f64 = g.nodes().iter().zip(g.weights()).map(|(p, w)| w * p[0].powi(5) * p[1].powi(4)).sum();
        assert!((v - 64.0 / 6.0 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(make_grid(&BoxDomain { lower: vec![1.0], upper: vec![1.0] }, 3, QuadratureRule::GaussLegendre).is_err());
        assert!(make_grid(&BoxDomain::interval(0.0, 1.0).unwrap(), 0, QuadratureRule::GaussLegendre).is_err());
        assert!(Grid::new(vec![vec![0.0], vec![0.0]], vec![1.0, 1.0]).is_err());
        assert!(Grid::new(vec![vec![0.0]], vec![0.0]).is_err());
        assert!(Grid::new(vec![vec![0.0]], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn constant_kernel_trace() {
        let g = unit_grid(8);
        let k = KernelGrid::from_fn(g, |_, _| 2.5);
        let op = kernel_to_operator(&k, &Tolerances::default()).unwrap();
        assert!((op.trace() - 2.5).abs() < 1e-14);
        assert!(op.is_nonnegative(&Tolerances::default()));
    }

    #[test]
    fn rank_one_trace() {
        let g = unit_grid(6);
        let f: Vec<f64> = g.nodes().iter().map(|x| (3.0 * x[0]).sin() + 1.0).collect();
        let k = KernelGrid::from_fn(g.clone(), |x, y| ((3.0 * x[0]).sin() + 1.0) * ((3.0 * y[0]).sin() + 1.0));
        let op = kernel_to_operator(&k, &Tolerances::default()).unwrap();
        let expected: f64 = g.inner(&f, &f);
        assert!((op.trace() - expected).abs() < 1e-14);
        let s = op.spectrum();
        assert!(s.values[1].abs() < 1e-12);
    }

    #[test]
    fn min_kernel_trace_matches_integral() {
        let g = unit_grid(32);
        let k = KernelGrid::from_fn(g, |x, y| x[0].min(y[0]));
        let op = kernel_to_operator(&k, &Tolerances::default()).unwrap();
        assert!((op.trace() - 0.5).abs() < 1e-13);
    }

    #[test]
    fn asymmetric_kernel_rejected() {
        let g = unit_grid(3);
        let k = KernelGrid::from_fn(g, |x, y| x[0] * 2.0 + y[0]);
        assert!(matches!(kernel_to_operator(&k, &Tolerances::default()), Err(Error::InvalidKernel(_))));
    }

    #[test]
    fn norms_of_simple_spectra() {
        let k = diag_op(&[2.0, -1.0]);
        assert!((k.trace_norm() - 3.0).abs() < 1e-15);
        let k = diag_op(&[3.0, 4.0]);
        assert!((k.hs_norm() - 5.0).abs() < 1e-15);
        assert!((k.op_norm() - 4.0).abs() < 1e-15);
        let z = k.try_sub(&k).unwrap();
        assert_eq!((z.trace_norm(), z.hs_norm(), z.op_norm()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn sqrt_of_scaled_identity_and_rank_one() {
        let g = unit_grid(5);
        let tol = Tolerances::default();
        let r = sqrt_op(&OperatorRep::scaled_identity(g.clone(), 9.0), &tol).unwrap();
        assert!((r.sym() - DMatrix::identity(5, 5) * 3.0).amax() < 1e-14);
        // ‖f‖² = 4
        let f = vec![2.0; 5];
        let op = OperatorRep::rank_one(g, &f).unwrap();
        assert!((op.trace() - 4.0).abs() < 1e-14);
        let r = sqrt_op(&op, &tol).unwrap();
        assert!((r.trace_norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let k = diag_op(&[1.0, -0.5]);
        assert!(matches!(sqrt_op(&k, &Tolerances::default()), Err(Error::NotPsd { .. })));
        let k = diag_op(&[1.0, -1e-12]);
        assert!(sqrt_op(&k, &Tolerances::default()).is_ok());
    }

    #[test]
    fn scalar_powers_stormer_and_metrics() {
        let g = point_grid();
        let tol = Tolerances::default();
        let a = OperatorRep::scaled_identity(g.clone(), 1.0);
        let b = OperatorRep::scaled_identity(g, 4.0);
        let ps = powers_stormer_gap(&a, &b, &tol).unwrap();
        assert!((ps.lhs - 1.0).abs() < 1e-15 && (ps.rhs - 3.0).abs() < 1e-15);
        let m = equiv_metrics(&a, &b, &tol).unwrap();
        assert!((m.d_sqrt_hs - 1.0).abs() < 1e-15);
        assert!((m.d_tr - 3.0).abs() < 1e-15 && (m.d_hs - 3.0).abs() < 1e-15 && (m.d_trace_gap - 3.0).abs() < 1e-15);
        let same = powers_stormer_gap(&a, &a, &tol).unwrap();
        assert_eq!((same.lhs, same.rhs), (0.0, 0.0));
    }

    #[test]
    fn psd_projection() {
        let k = diag_op(&[1.0, -0.5]);
        let tol = Tolerances::default();
        let p = psd_project(k.grid().clone(), k.sym(), &tol).unwrap();
        assert!((p.sym() - DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.0]))).amax() < 1e-15);
        let q = psd_project(p.grid().clone(), p.sym(), &tol).unwrap();
        assert_eq!(q.sym(), p.sym());
    }

    #[test]
    fn kernel_round_trip() {
        let g = unit_grid(7);
        let k = KernelGrid::from_fn(g, |x, y| (-(x[0] - y[0]).powi(2)).exp());
        let op = kernel_to_operator(&k, &Tolerances::default()).unwrap();
        assert!(op.kernel().sup_distance(&k) < 1e-14);
    }
}
