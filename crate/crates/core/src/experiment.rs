//! Config-driven experiments.
//!
//! An [`ExperimentConfig`] is parsed from JSON, validated in full before any
//! sampling, and run into an output directory. Artifacts are first written to
//! `<out>.partial` and renamed once `manifest.json` (config hash, seed,
//! version, artifact hashes) is complete, so a failed run never leaves an
//! unmanifested result directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chain::{simulate_replicates, NetworkConfig};
use crate::diagnostics::{clt_diagnostic, singvalue_tail_check, CltOptions};
use crate::error::{Error, Result};
use crate::io::{self, Cell};
use crate::nngp::{lln_distance_curve, nngp_chain, NngpOptions};
use crate::operator::{make_grid, BoxDomain, Grid, KernelGrid, QuadratureRule, Tolerances};
use crate::posterior::{estimate_i0, mf_rate, posterior_resample, I0Search, InputLookup, TrainingSet};
use crate::rate::{chain_rate, tail_slope, ChainEvent, RateOptions};
use crate::rng::SeedSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    /// Tensor quadrature grid on a box.
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
        n: usize,
        #[serde(default = "default_rule")]
        rule: QuadratureRule,
    },
    /// Explicit points sharing one weight.
    Points {
        points: Vec<Vec<f64>>,
        #[serde(default = "default_weight")]
        weight: f64,
    },
}

fn default_rule() -> QuadratureRule {
    QuadratureRule::GaussLegendre
}

fn default_weight() -> f64 {
    1.0
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        match self {
            GridSpec::Box { lower, upper, n, rule } => make_grid(&BoxDomain::new(lower.clone(), upper.clone())?, *n, *rule),
            GridSpec::Points { points, weight } => Grid::from_points(points.clone(), *weight),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainingSource {
    Inline { inputs: Vec<Vec<f64>>, responses: Vec<Vec<f64>>, beta: f64 },
    /// CSV with `x…` input columns and `y…` response columns.
    Csv { path: PathBuf, beta: f64 },
}

impl TrainingSource {
    pub fn load(&self) -> Result<TrainingSet> {
        match self {
            TrainingSource::Inline { inputs, responses, beta } => TrainingSet::new(inputs.clone(), responses.clone(), *beta),
            TrainingSource::Csv { path, beta } => io::read_training_csv(path, *beta),
        }
    }
}

fn one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltParams {
    pub inputs: Vec<Vec<f64>>,
    pub n: usize,
    #[serde(default = "one")]
    pub outputs: usize,
    pub draws: usize,
    #[serde(default)]
    pub options: CltOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingularParams {
    pub n1: usize,
    pub n2: usize,
    pub lambda: f64,
    pub t_values: Vec<f64>,
    pub reps: usize,
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentKind {
    /// Replicates of the covariance chain at width scale `n`.
    Simulate {
        n: usize,
        #[serde(default = "one")]
        reps: usize,
    },
    /// The infinite-width kernels `𝒦²_∞ … 𝒦^{L+1}_∞`.
    Nngp,
    /// Distance of finite-width chains to the limit as `N` grows.
    Lln { ns: Vec<usize>, reps: usize },
    /// Chain rate along simulated chains at scale `n`, or along the limit path when `n` is absent.
    Rate {
        #[serde(default)]
        n: Option<usize>,
        #[serde(default = "one")]
        reps: usize,
    },
    /// Empirical decay of `P(event)` in `N`.
    Tail { event: ChainEvent, ns: Vec<usize>, reps: usize },
    /// Importance-weighted posterior over prior chains.
    Posterior {
        n: usize,
        prior_samples: usize,
        train: TrainingSource,
        #[serde(default)]
        mean_field: bool,
        #[serde(default = "default_true")]
        resample: bool,
        #[serde(default)]
        lookup: InputLookup,
    },
    /// `I₀` search and mean-field rates of sampled chains.
    Mf {
        train: TrainingSource,
        n: usize,
        chains: usize,
        #[serde(default)]
        search: I0Search,
    },
    Diagnostics {
        #[serde(default)]
        clt: Option<CltParams>,
        #[serde(default)]
        singular: Option<SingularParams>,
    },
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Simulate { .. } => "simulate",
            ExperimentKind::Nngp => "nngp",
            ExperimentKind::Lln { .. } => "lln",
            ExperimentKind::Rate { .. } => "rate",
            ExperimentKind::Tail { .. } => "tail",
            ExperimentKind::Posterior { .. } => "posterior",
            ExperimentKind::Mf { .. } => "mf",
            ExperimentKind::Diagnostics { .. } => "diagnostics",
        }
    }
}

/// Top-level experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub network: NetworkConfig,
    pub grid: GridSpec,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub nngp: NngpOptions,
    #[serde(default)]
    pub rate: RateOptions,
}

fn cfg_err(field: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {e}"))
}

fn require(cond: bool, field: &str, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(cfg_err(field, msg))
    }
}

fn check_on_grid(train: &TrainingSet, grid: &Grid, lookup: InputLookup, field: &str) -> Result<()> {
    for (i, x) in train.inputs.iter().enumerate() {
        if grid.find_node(x, 1e-12).is_none() {
            let inside = grid.dim() == 1 && {
                let lo = grid.nodes().iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
                let hi = grid.nodes().iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
                x.len() == 1 && x[0] >= lo && x[0] <= hi
            };
            if lookup == InputLookup::GridNodes || !inside {
                return Err(cfg_err(field, format!("training input {i} is not a grid node")));
            }
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn master_seed(&self) -> SeedSpec {
        SeedSpec::new(self.seed)
    }

    /// Full validation; every error is reported as [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        self.network.validate().map_err(|e| cfg_err("network", e))?;
        let grid = self.grid.build().map_err(|e| cfg_err("grid", e))?;
        require(grid.dim() == self.network.input_dim, "grid", "node dimension must equal network.input_dim")?;
        self.tolerances.validate().map_err(|e| cfg_err("tolerances", e))?;
        self.nngp.validate().map_err(|e| cfg_err("nngp", e))?;
        self.rate.validate().map_err(|e| cfg_err("rate", e))?;
        let net = &self.network;
        match &self.experiment {
            ExperimentKind::Simulate { n, reps } => {
                require(*n >= 1, "experiment.n", "must be >= 1")?;
                require(*reps >= 1, "experiment.reps", "must be >= 1")?;
            }
            ExperimentKind::Nngp => {}
            ExperimentKind::Lln { ns, reps } => {
                require(!ns.is_empty() && ns.iter().all(|n| *n >= 1), "experiment.ns", "needs at least one N >= 1")?;
                require(*reps >= 1, "experiment.reps", "must be >= 1")?;
            }
            ExperimentKind::Rate { n, reps } => {
                net.activation.require_subquadratic().map_err(|e| cfg_err("network.activation", e))?;
                require(n.is_none_or(|n| n >= 1), "experiment.n", "must be >= 1")?;
                require(*reps >= 1, "experiment.reps", "must be >= 1")?;
            }
            ExperimentKind::Tail { event, ns, reps } => {
                event.validate(net, grid.len()).map_err(|e| cfg_err("experiment.event", e))?;
                require(ns.len() >= 3 && ns.iter().all(|n| *n >= 1), "experiment.ns", "needs at least three N >= 1")?;
                require(*reps >= 1, "experiment.reps", "must be >= 1")?;
            }
            ExperimentKind::Posterior { n, prior_samples, train, lookup, .. } => {
                require(*n >= 1, "experiment.n", "must be >= 1")?;
                require(*prior_samples >= 1, "experiment.prior_samples", "must be >= 1")?;
                let t = train.load().map_err(|e| cfg_err("experiment.train", e))?;
                require(t.inputs[0].len() == net.input_dim, "experiment.train", "input dimension must equal network.input_dim")?;
                check_on_grid(&t, &grid, *lookup, "experiment.train")?;
            }
            ExperimentKind::Mf { train, n, chains, search } => {
                net.activation.require_subquadratic().map_err(|e| cfg_err("network.activation", e))?;
                require(*n >= 1, "experiment.n", "must be >= 1")?;
                require(*chains >= 1, "experiment.chains", "must be >= 1")?;
                search.validate().map_err(|e| cfg_err("experiment.search", e))?;
                let t = train.load().map_err(|e| cfg_err("experiment.train", e))?;
                require(t.inputs[0].len() == net.input_dim, "experiment.train", "input dimension must equal network.input_dim")?;
                check_on_grid(&t, &grid, InputLookup::GridNodes, "experiment.train")?;
            }
            ExperimentKind::Diagnostics { clt, singular } => {
                require(clt.is_some() || singular.is_some(), "experiment", "diagnostics needs clt and/or singular")?;
                if let Some(c) = clt {
                    require(!c.inputs.is_empty(), "experiment.clt.inputs", "needs at least one input")?;
                    require(c.inputs.iter().all(|x| x.len() == net.input_dim), "experiment.clt.inputs", "dimension must equal network.input_dim")?;
                    Grid::from_points(c.inputs.clone(), 1.0).map_err(|e| cfg_err("experiment.clt.inputs", e))?;
                    require(c.n >= 1, "experiment.clt.n", "must be >= 1")?;
                    require(c.outputs >= 1 && c.outputs <= net.output_dim, "experiment.clt.outputs", "must lie in 1..=network.output_dim")?;
                    require(c.draws >= 2, "experiment.clt.draws", "must be >= 2")?;
                    require(c.options.level > 0.0 && c.options.level < 1.0, "experiment.clt.options.level", "must lie in (0, 1)")?;
                    require(c.options.bootstrap >= 1, "experiment.clt.options.bootstrap", "must be >= 1")?;
                    c.options.nngp.validate().map_err(|e| cfg_err("experiment.clt.options.nngp", e))?;
                }
                if let Some(s) = singular {
                    require(s.n1 >= 1 && s.n2 >= 1, "experiment.singular", "n1 and n2 must be >= 1")?;
                    require(s.reps >= 1000, "experiment.singular.reps", "must be >= 1000")?;
                    require(s.lambda > 0.0 && s.c > 0.0, "experiment.singular", "lambda and c must be positive")?;
                    require(s.t_values.iter().all(|t| t.is_finite() && *t >= 0.0), "experiment.singular.t_values", "must be non-negative")?;
                }
            }
        }
        Ok(())
    }

    /// The configuration with its output location removed; this is what
    /// `config.json` stores and what the manifest hashes.
    pub fn effective(&self) -> Self {
        Self { output_dir: None, ..self.clone() }
    }

    /// SHA-256 of the canonical JSON of the effective configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(io::sha256_hex(serde_json::to_string(&self.effective())?.as_bytes()))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub seed: u64,
    pub config_sha256: String,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub summary: String,
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
    summary: String,
}

impl Writer {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.summary.push_str(s.as_ref());
        self.summary.push('\n');
    }

    fn kernel(&mut self, name: &str, k: &KernelGrid) -> Result<()> {
        let p = self.path(name);
        io::write_kernel_csv(&p, k)
    }
}

const TAG_CHAINS: u64 = 1;
const TAG_RATE: u64 = 2;
const TAG_RESAMPLE: u64 = 3;
const TAG_SEARCH: u64 = 4;
const TAG_CLT: u64 = 5;
const TAG_SINGULAR: u64 = 6;

fn run_kind(cfg: &ExperimentConfig, w: &mut Writer) -> Result<()> {
    let tol = &cfg.tolerances;
    let net = &cfg.network;
    let grid = Arc::new(cfg.grid.build()?);
    let master = cfg.master_seed();
    let rate_opts = RateOptions { seed: master.derive(TAG_RATE), ..cfg.rate };
    match &cfg.experiment {
        ExperimentKind::Simulate { n, reps } => {
            let states = simulate_replicates(net, *n, &grid, *reps, master.derive(TAG_CHAINS), tol)?;
            let mut rows = Vec::new();
            for (r, s) in states.iter().enumerate() {
                for (i, name) in io::write_chain_state(&w.dir.join(format!("chain_{r}")), s)?.into_iter().enumerate() {
                    let _ = i;
                    w.files.push(format!("chain_{r}/{name}"));
                }
                for (l, k) in s.operators.iter().enumerate() {
                    rows.push(vec![Cell::from(r), Cell::from(l + 2), k.trace().into(), k.trace_norm().into(), k.hs_norm().into(), k.op_norm().into()]);
                }
            }
            let p = w.path("chains.csv");
            io::write_table(&p, &["rep", "layer", "trace", "trace_norm", "hs_norm", "op_norm"], &rows)?;
            w.line(format!("simulated {reps} chain(s) at N = {n}, widths {:?}", net.widths(*n)));
        }
        ExperimentKind::Nngp => {
            let ks = nngp_chain(net, grid.clone(), &cfg.nngp, tol)?;
            for (l, k) in ks.iter().enumerate() {
                w.kernel(&format!("nngp_layer_{}.csv", l + 2), &k.kernel())?;
                w.line(format!("layer {}: trace {:.6e}, op norm {:.6e}", l + 2, k.trace(), k.op_norm()));
            }
        }
        ExperimentKind::Lln { ns, reps } => {
            let rows = lln_distance_curve(net, grid.clone(), ns, *reps, master.derive(TAG_CHAINS), &cfg.nngp, tol)?;
            let cells: Vec<Vec<Cell>> = rows.iter().map(|r| vec![r.n.into(), r.layer.into(), r.median.into(), r.iqr.into()]).collect();
            let p = w.path("lln.csv");
            io::write_table(&p, &["N", "layer", "median", "iqr"], &cells)?;
            for r in rows.iter().filter(|r| r.layer == net.depth + 1) {
                w.line(format!("N = {}: median trace-norm distance {:.4e} (IQR {:.2e})", r.n, r.median, r.iqr));
            }
        }
        ExperimentKind::Rate { n, reps } => {
            let k1 = crate::chain::init_kernel(grid.clone(), net.lambda(0), net.bias(1))?;
            let paths: Vec<Vec<_>> = match n {
                Some(n) => simulate_replicates(net, *n, &grid, *reps, master.derive(TAG_CHAINS), tol)?
                    .into_iter()
                    .map(|s| s.operators)
                    .collect(),
                None => vec![nngp_chain(net, grid.clone(), &cfg.nngp, tol)?],
            };
            let mut rows = Vec::new();
            let mut traces = Vec::new();
            for (r, path) in paths.iter().enumerate() {
                let opts = RateOptions { seed: rate_opts.seed.derive(r as u64), ..rate_opts };
                let cr = chain_rate(path, &k1, net, &opts, tol)?;
                for (l, est) in cr.estimates.iter().enumerate() {
                    let layer = l + 2;
                    match est {
                        Some(e) => {
                            rows.push(vec![
                                Cell::from(r), Cell::from(layer), e.value.into(), e.mc_stderr.into(), e.iterations.into(),
                                e.converged.into(), e.ess_min.into(), e.grad_norm.into(),
                            ]);
                            let p = w.path(&format!("dual_rep{r}_layer{layer}.csv"));
                            io::write_kernel_csv(&p, &KernelGrid::new(e.dual.grid.clone(), e.dual.sym.clone())?)?;
                            traces.push(serde_json::json!({"rep": r, "layer": layer, "objective": e.objective_trace}));
                        }
                        None => rows.push(vec![
                            Cell::from(r), Cell::from(layer), f64::INFINITY.into(), f64::NAN.into(), 0usize.into(),
                            false.into(), f64::NAN.into(), f64::NAN.into(),
                        ]),
                    }
                }
                w.line(format!("path {r}: total rate {:.6e}, per layer {:?}", cr.total, cr.per_layer));
            }
            let p = w.path("rates.csv");
            io::write_table(&p, &["rep", "layer", "value", "mc_stderr", "iterations", "converged", "ess_min", "grad_norm"], &rows)?;
            let p = w.path("rate_traces.json");
            io::write_json(&p, &traces)?;
        }
        ExperimentKind::Tail { event, ns, reps } => {
            let t = tail_slope(event, net, grid.clone(), ns, *reps, master.derive(TAG_CHAINS), tol)?;
            let rows: Vec<Vec<Cell>> = t
                .counts
                .iter()
                .map(|c| vec![c.n.into(), c.reps.into(), c.hits.into(), c.probability.into(), c.used.into()])
                .collect();
            let p = w.path("tail_counts.csv");
            io::write_table(&p, &["N", "reps", "hits", "probability", "used"], &rows)?;
            let p = w.path("tail_slope.json");
            io::write_json(&p, &t)?;
            w.line(format!("tail slope {:.6e} ± {:.2e}", t.slope, t.stderr));
        }
        ExperimentKind::Posterior { n, prior_samples, train, mean_field, resample, lookup } => {
            let train = train.load()?;
            let prior = simulate_replicates(net, *n, &grid, *prior_samples, master.derive(TAG_CHAINS), tol)?;
            let ens = posterior_resample(prior, &train, *mean_field, *lookup, *resample, master.derive(TAG_RESAMPLE))?;
            let rows: Vec<Vec<Cell>> = ens
                .log_weights
                .iter()
                .zip(&ens.weights)
                .enumerate()
                .map(|(i, (l, wt))| vec![i.into(), (*l).into(), (*wt).into()])
                .collect();
            let p = w.path("posterior_weights.csv");
            io::write_table(&p, &["sample", "log_weight", "weight"], &rows)?;
            let meta = serde_json::json!({
                "n": n, "samples": prior_samples, "mean_field": mean_field, "ess": ens.ess,
                "interpolated": ens.interpolated, "resampled": ens.resampled,
            });
            let p = w.path("posterior.json");
            io::write_json(&p, &meta)?;
            w.line(format!("posterior over {prior_samples} prior chains: ESS {:.2}", ens.ess));
            if ens.interpolated {
                w.line("training kernel values were interpolated between grid nodes");
            }
        }
        ExperimentKind::Mf { train, n, chains, search } => {
            let train = train.load()?;
            let est = estimate_i0(net, grid.clone(), &train, search, &rate_opts, master.derive(TAG_SEARCH), tol)?;
            for (l, k) in est.argmin.iter().enumerate() {
                w.kernel(&format!("i0_argmin_layer_{}.csv", l + 2), &k.kernel())?;
            }
            let p = w.path("i0.json");
            io::write_json(&p, &est)?;
            let k1 = crate::chain::init_kernel(grid.clone(), net.lambda(0), net.bias(1))?;
            let states = simulate_replicates(net, *n, &grid, *chains, master.derive(TAG_CHAINS), tol)?;
            let mut rows = Vec::new();
            for (c, s) in states.iter().enumerate() {
                let opts = RateOptions { seed: rate_opts.seed.derive(c as u64 + 1), ..rate_opts };
                let mf = mf_rate(&s.operators, &k1, &train, net, est.i0_upper, &opts, search.lookup, tol)?;
                rows.push(vec![c.into(), mf.prior_rate.total.into(), mf.quad.into(), mf.value.into(), mf.stderr.into()]);
            }
            let p = w.path("mf_rates.csv");
            io::write_table(&p, &["chain", "prior_rate", "quad", "mf_rate", "stderr"], &rows)?;
            w.line(format!("I0 upper bound {:.6e} (search value {:.6e})", est.i0_upper, est.search_value));
        }
        ExperimentKind::Diagnostics { clt, singular } => {
            if let Some(c) = clt {
                let rep = clt_diagnostic(net, &c.inputs, c.n, c.outputs, c.draws, master.derive(TAG_CLT), &c.options, tol)?;
                let rows: Vec<Vec<Cell>> = rep
                    .coordinates
                    .iter()
                    .map(|m| vec![m.index.into(), m.skewness.into(), m.kurtosis.into(), m.skew_z.into(), m.kurt_z.into()])
                    .collect();
                let p = w.path("clt_coordinates.csv");
                io::write_table(&p, &["coordinate", "skewness", "kurtosis", "skew_z", "kurt_z"], &rows)?;
                let p = w.path("clt.json");
                io::write_json(&p, &rep)?;
                w.line(format!(
                    "CLT at N = {}: energy statistic {:.4e}, p = {:.4}, {}",
                    rep.n,
                    rep.energy_statistic,
                    rep.p_value,
                    if rep.passed { "pass" } else { "fail" }
                ));
            }
            if let Some(s) = singular {
                let rows = singvalue_tail_check(s.n1, s.n2, s.lambda, &s.t_values, s.reps, s.c, master.derive(TAG_SINGULAR))?;
                let cells: Vec<Vec<Cell>> = rows
                    .iter()
                    .map(|r| {
                        vec![
                            r.t.into(), r.threshold.into(), r.exceedances.into(), r.reps.into(), r.empirical.into(),
                            r.wilson_low.into(), r.wilson_high.into(), r.bound.into(), r.violated.into(),
                        ]
                    })
                    .collect();
                let p = w.path("singular_tails.csv");
                io::write_table(
                    &p,
                    &["t", "threshold", "exceedances", "reps", "empirical", "wilson_low", "wilson_high", "bound", "violated"],
                    &cells,
                )?;
                let bad = rows.iter().filter(|r| r.violated).count();
                w.line(format!("singular-value tails: {bad} of {} t values violate the bound", rows.len()));
            }
        }
    }
    Ok(())
}

fn partial_dir(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".partial");
    out.with_file_name(name)
}

/// Validate and run. The output goes to `out`, or the config's `output_dir`,
/// or `nngp-ldp-out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let out: PathBuf = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("nngp-ldp-out"));
    if out.exists() && !out.join("manifest.json").is_file() {
        return Err(Error::Config(format!(
            "output_dir: {} exists and is not a previous run directory",
            out.display()
        )));
    }
    let partial = partial_dir(&out);
    if partial.exists() {
        fs::remove_dir_all(&partial)?;
    }
    fs::create_dir_all(&partial)?;
    let mut w = Writer { dir: partial.clone(), files: Vec::new(), summary: String::new() };
    let result = (|| -> Result<Manifest> {
        let p = w.path("config.json");
        io::write_json(&p, &cfg.effective())?;
        run_kind(cfg, &mut w)?;
        let mut files = w.files.clone();
        files.sort();
        let artifacts = files
            .iter()
            .map(|f| Ok(ArtifactEntry { file: f.clone(), sha256: io::sha256_file(&partial.join(f))? }))
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            tool: "nngp-ldp".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            kind: cfg.experiment.name().into(),
            seed: cfg.seed,
            config_sha256: cfg.hash()?,
            artifacts,
        };
        let mut summary = String::new();
        let _ = writeln!(summary, "nngp-ldp {} run, kind {}", manifest.version, manifest.kind);
        let _ = writeln!(summary, "seed {}, config sha256 {}", cfg.seed, manifest.config_sha256);
        summary.push_str(&w.summary);
        io::write_text(&partial.join("summary.txt"), &summary)?;
        io::write_json(&partial.join("manifest.json"), &manifest)?;
        w.summary = summary;
        Ok(manifest)
    })();
    match result {
        Ok(manifest) => {
            if out.exists() {
                fs::remove_dir_all(&out)?;
            }
            fs::rename(&partial, &out)?;
            Ok(RunOutcome { output_dir: out, manifest, summary: w.summary })
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&partial);
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NNGP: &str = r#"{
        "experiment": {"kind": "nngp"},
        "network": {"depth": 2, "input_dim": 1, "width_ratios": [1, 1], "lambdas": [1, 1, 1], "activation": {"kind": "relu"}},
        "grid": {"type": "box", "lower": [0], "upper": [1], "n": 4},
        "seed": 7
    }"#;

    #[test]
    fn nngp_run_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json(NNGP).unwrap();
        let a = run_experiment(&cfg, Some(&dir.path().join("a"))).unwrap();
        let b = run_experiment(&cfg, Some(&dir.path().join("b"))).unwrap();
        let kernels: Vec<_> = a.manifest.artifacts.iter().filter(|f| f.file.starts_with("nngp_layer_")).collect();
        assert_eq!(kernels.len(), 2);
        for (x, y) in a.manifest.artifacts.iter().zip(&b.manifest.artifacts) {
            assert_eq!(x.sha256, y.sha256);
        }
        assert!(dir.path().join("a/manifest.json").is_file());
        assert!(!dir.path().join("a.partial").exists());
        // rerun into an existing run directory replaces it
        run_experiment(&cfg, Some(&dir.path().join("a"))).unwrap();
    }

    #[test]
    fn missing_lambdas_named() {
        let text = NNGP.replace(r#""lambdas": [1, 1, 1], "#, "");
        match ExperimentConfig::from_json(&text) {
            Err(Error::Config(msg)) => assert!(msg.contains("lambdas"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_catches_rate_with_relu() {
        let text = NNGP.replace(r#"{"kind": "nngp"}"#, r#"{"kind": "rate"}"#);
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        match cfg.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("network.activation"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn refuses_foreign_output_dir() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep.txt"), "x").unwrap();
        let cfg = ExperimentConfig::from_json(NNGP).unwrap();
        assert!(matches!(run_experiment(&cfg, Some(dir.path())), Err(Error::Config(_))));
        assert!(dir.path().join("keep.txt").exists());
    }
}
