//! Gaussian random fields on the grid and the rank-one operators `C_h`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{invalid, Error, Result};
use crate::operator::{Grid, OperatorRep, Tolerances};
use crate::rng::{fill_normals, SeedSpec};

/// Rows drawn per independent random stream.
pub const SAMPLE_BLOCK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Identity,
    Relu,
    Tanh,
    Erf,
    /// `x ↦ clamp(x, -bound, bound)`.
    ClippedLinear { bound: f64 },
    /// Monotone piecewise-linear table, constant outside `[xs[0], xs[last]]`.
    Custom { xs: Vec<f64>, ys: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ActivationData {
    #[serde(flatten)]
    kind: ActivationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    growth_exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    growth_const: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lipschitz: Option<f64>,
}

/// Activation `σ` with its declared growth `σ(x)² ≤ A(1 + |x|^r)` and
/// Lipschitz constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ActivationData", into = "ActivationData")]
pub struct ActivationSpec {
    kind: ActivationKind,
    growth_exponent: f64,
    growth_const: f64,
    lipschitz: Option<f64>,
}

impl TryFrom<ActivationData> for ActivationSpec {
    type Error = Error;
    fn try_from(d: ActivationData) -> Result<Self> {
        match d.kind {
            ActivationKind::Custom { xs, ys } => {
                let r = d.growth_exponent.ok_or_else(|| invalid("custom activation needs growth_exponent"))?;
                let a = d.growth_const.ok_or_else(|| invalid("custom activation needs growth_const"))?;
                ActivationSpec::custom(xs, ys, r, a, d.lipschitz)
            }
            kind => {
                let spec = ActivationSpec::builtin(kind)?;
                let declared = [
                    ("growth_exponent", d.growth_exponent, Some(spec.growth_exponent)),
                    ("growth_const", d.growth_const, Some(spec.growth_const)),
                    ("lipschitz", d.lipschitz, spec.lipschitz),
                ];
                for (name, given, fixed) in declared {
                    if let Some(g) = given {
                        if Some(g) != fixed {
                            return Err(invalid(format!(
                                "{name} = {g} conflicts with the built-in value {fixed:?}"
                            )));
                        }
                    }
                }
                Ok(spec)
            }
        }
    }
}

impl From<ActivationSpec> for ActivationData {
    fn from(a: ActivationSpec) -> Self {
        let custom = matches!(a.kind, ActivationKind::Custom { .. });
        ActivationData {
            growth_exponent: custom.then_some(a.growth_exponent),
            growth_const: custom.then_some(a.growth_const),
            lipschitz: if custom { a.lipschitz } else { None },
            kind: a.kind,
        }
    }
}

impl ActivationSpec {
    fn builtin(kind: ActivationKind) -> Result<Self> {
        let (r, a, l) = match &kind {
            ActivationKind::Identity | ActivationKind::Relu => (2.0, 1.0, Some(1.0)),
            ActivationKind::Tanh => (1.0, 1.0, Some(1.0)),
            ActivationKind::Erf => (1.0, 1.0, Some(2.0 / std::f64::consts::PI.sqrt())),
            ActivationKind::ClippedLinear { bound } => {
                if !(bound.is_finite() && *bound > 0.0) {
                    return Err(invalid("clipped-linear bound must be positive"));
                }
                (1.0, bound * bound, Some(1.0))
            }
            ActivationKind::Custom { .. } => unreachable!("custom tables are built by ActivationSpec::custom"),
        };
        Ok(Self { kind, growth_exponent: r, growth_const: a, lipschitz: l })
    }

    pub fn identity() -> Self {
        Self::builtin(ActivationKind::Identity).unwrap()
    }

    pub fn relu() -> Self {
        Self::builtin(ActivationKind::Relu).unwrap()
    }

    pub fn tanh() -> Self {
        Self::builtin(ActivationKind::Tanh).unwrap()
    }

    pub fn erf() -> Self {
        Self::builtin(ActivationKind::Erf).unwrap()
    }

    pub fn clipped_linear(bound: f64) -> Result<Self> {
        Self::builtin(ActivationKind::ClippedLinear { bound })
    }

    /// Piecewise-linear table. The declared constants are checked on the
    /// table range only.
    pub fn custom(xs: Vec<f64>, ys: Vec<f64>, r: f64, a: f64, lipschitz: Option<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(invalid("custom activation table needs >= 2 points and matching lengths"));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(invalid("custom activation table must be finite"));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("custom activation xs must be strictly increasing"));
        }
        if ys.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("custom activation ys must be non-decreasing"));
        }
        if !(r > 0.0 && r <= 2.0) {
            return Err(invalid(format!("growth exponent {r} outside (0, 2]")));
        }
        if !(a.is_finite() && a > 0.0) {
            return Err(invalid("growth constant must be positive"));
        }
        for (x, y) in xs.iter().zip(&ys) {
            if y * y > a * (1.0 + x.abs().powf(r)) * (1.0 + 1e-12) {
                return Err(invalid(format!("table point ({x}, {y}) violates the declared growth bound")));
            }
        }
        if let Some(l) = lipschitz {
            if !(l.is_finite() && l > 0.0) {
                return Err(invalid("lipschitz constant must be positive"));
            }
            for w in xs.iter().zip(&ys).collect::<Vec<_>>().windows(2) {
                let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
                if slope > l * (1.0 + 1e-12) {
                    return Err(invalid(format!("table slope {slope} exceeds declared lipschitz {l}")));
                }
            }
        }
        Ok(Self {
            kind: ActivationKind::Custom { xs, ys },
            growth_exponent: r,
            growth_const: a,
            lipschitz,
        })
    }

    pub fn kind(&self) -> &ActivationKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ActivationKind::Identity => "identity",
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Erf => "erf",
            ActivationKind::ClippedLinear { .. } => "clipped_linear",
            ActivationKind::Custom { .. } => "custom",
        }
    }

    pub fn growth_exponent(&self) -> f64 {
        self.growth_exponent
    }

    pub fn growth_const(&self) -> f64 {
        self.growth_const
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    /// `r = 2` is accepted for simulation but not for rate functions.
    pub fn is_boundary_growth(&self) -> bool {
        self.growth_exponent >= 2.0
    }

    pub fn require_subquadratic(&self) -> Result<()> {
        if self.is_boundary_growth() {
            Err(Error::UnsupportedGrowth(self.growth_exponent))
        } else {
            Ok(())
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match &self.kind {
            ActivationKind::Identity => x,
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Erf => erf(x),
            ActivationKind::ClippedLinear { bound } => x.clamp(-bound, *bound),
            ActivationKind::Custom { xs, ys } => interp_table(xs, ys, x),
        }
    }

    /// Points where `σ` is not smooth.
    pub fn breakpoints(&self) -> Vec<f64> {
        match &self.kind {
            ActivationKind::Relu => vec![0.0],
            ActivationKind::ClippedLinear { bound } => vec![-bound, *bound],
            ActivationKind::Custom { xs, .. } => xs.clone(),
            _ => Vec::new(),
        }
    }

    /// Declared bound on `‖C_f‖₁` given `‖f‖_H` on a set of measure `volume`:
    /// `A(vol + vol^{1-r/2}‖f‖^r)`, which is `A(1 + ‖f‖^r)` at unit volume.
    pub fn growth_bound(&self, f_norm: f64, volume: f64) -> f64 {
        let r = self.growth_exponent;
        self.growth_const * (volume + volume.powf(1.0 - 0.5 * r) * f_norm.powf(r))
    }
}

fn interp_table(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let last = xs.len() - 1;
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[last] {
        return ys[last];
    }
    let k = xs.partition_point(|v| *v <= x);
    let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// `m` independent fields, one per row, valued on the grid nodes.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub grid: Arc<Grid>,
    pub values: DMatrix<f64>,
}

/// Square-root factor of a non-negative operator, reusable across draws.
#[derive(Clone, Debug)]
pub struct FieldSampler {
    grid: Arc<Grid>,
    /// `n × r` factor `V·Λ^{1/2}` restricted to eigenvalues above round-off.
    factor: DMatrix<f64>,
}

impl FieldSampler {
    pub fn new(k: &OperatorRep, tol: &Tolerances) -> Result<Self> {
        k.check_psd(tol)?;
        let spec = k.spectrum();
        let n = k.len();
        let floor = k.round_off_floor();
        let keep: Vec<usize> = (0..n).filter(|&i| spec.values[i] > floor).collect();
        let factor = DMatrix::from_fn(n, keep.len(), |r, c| {
            spec.vectors[(r, keep[c])] * spec.values[keep[c]].sqrt()
        });
        Ok(Self { grid: k.grid().clone(), factor })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    /// `rows × n` block of fields in `√w`-coordinates, from one stream.
    pub fn sample_sym_block(&self, rows: usize, seed: SeedSpec) -> DMatrix<f64> {
        let n = self.factor.nrows();
        let r = self.rank();
        if r == 0 {
            return DMatrix::zeros(rows, n);
        }
        let mut xi = vec![0.0; rows * r];
        fill_normals(&mut seed.rng(), &mut xi);
        // xi is row-major rows × r; as a column-major r × rows matrix it is its transpose
        let xi_t = DMatrix::from_vec(r, rows, xi);
        (&self.factor * xi_t).transpose()
    }

    /// `m × n` fields in `√w`-coordinates. Block `b` uses stream `seed.derive(b)`.
    pub fn sample_sym(&self, m: usize, seed: SeedSpec) -> DMatrix<f64> {
        let n = self.factor.nrows();
        let blocks: Vec<usize> = (0..m.div_ceil(SAMPLE_BLOCK)).collect();
        let parts: Vec<DMatrix<f64>> = blocks
            .par_iter()
            .map(|&b| {
                let rows = SAMPLE_BLOCK.min(m - b * SAMPLE_BLOCK);
                self.sample_sym_block(rows, seed.derive(b as u64))
            })
            .collect();
        let mut out = DMatrix::zeros(m, n);
        for (b, part) in parts.iter().enumerate() {
            out.rows_mut(b * SAMPLE_BLOCK, part.nrows()).copy_from(part);
        }
        out
    }

    pub fn sample(&self, m: usize, seed: SeedSpec) -> FieldSample {
        let mut values = self.sample_sym(m, seed);
        for (j, sw) in self.grid.sqrt_weights().iter().enumerate() {
            values.column_mut(j).unscale_mut(*sw);
        }
        FieldSample { grid: self.grid.clone(), values }
    }
}

/// `m` iid fields `h ~ 𝒩_H(0, K)`.
pub fn sample_field(k: &OperatorRep, m: usize, seed: SeedSpec, tol: &Tolerances) -> Result<FieldSample> {
    if m == 0 {
        return Err(invalid("number of fields must be positive"));
    }
    Ok(FieldSampler::new(k, tol)?.sample(m, seed))
}

/// Operator of the kernel `(1/m) Σ h_i(x) h_i(y)`.
pub fn empirical_covariance(s: &FieldSample) -> OperatorRep {
    let m = s.values.nrows().max(1) as f64;
    let mut scaled = s.values.clone();
    for (j, sw) in s.grid.sqrt_weights().iter().enumerate() {
        scaled.column_mut(j).scale_mut(*sw);
    }
    let sym = scaled.tr_mul(&scaled) / m;
    OperatorRep::from_sym_unchecked(s.grid.clone(), crate::operator::symmetrize(&sym))
}

/// `σ` applied to a field in `√w`-coordinates, returned in `√w`-coordinates.
pub(crate) fn activate_sym(act: &ActivationSpec, sqrt_w: &[f64], h_sym: &mut DMatrix<f64>) {
    for (j, sw) in sqrt_w.iter().enumerate() {
        for v in h_sym.column_mut(j).iter_mut() {
            *v = sw * act.apply(*v / sw);
        }
    }
}

/// Rank-one operator `C_h` with kernel `σ(h(x))σ(h(y))`.
pub fn cf_operator(h: &[f64], act: &ActivationSpec, grid: Arc<Grid>) -> Result<OperatorRep> {
    if h.len() != grid.len() {
        return Err(invalid("field length does not match grid"));
    }
    let s: Vec<f64> = h.iter().map(|v| act.apply(*v)).collect();
    OperatorRep::rank_one(grid, &s)
}
