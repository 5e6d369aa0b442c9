//! Covariance Markov chains of wide fully connected Gaussian networks.
//!
//! Kernels on a compact input set are discretised on a quadrature grid and
//! handled as symmetric trace-class operators. On top of that the crate
//! provides the random covariance chain and its infinite-width (NNGP) limit,
//! Monte-Carlo evaluation of the large-deviation rate function by dual
//! ascent, posterior and mean-field tilting under a Gaussian likelihood, and
//! a config-driven experiment runner.

pub mod chain;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod field;
pub mod io;
pub mod nngp;
pub mod operator;
pub mod posterior;
pub mod quadrature;
pub mod rate;
pub mod rng;
pub mod stats;

pub use chain::{init_kernel, simulate_chain, ChainState, NetworkConfig};
pub use error::{Error, Result};
pub use field::{ActivationKind, ActivationSpec, FieldSample};
pub use operator::{make_grid, BoxDomain, Grid, KernelGrid, OperatorRep, QuadratureRule, Tolerances};
pub use rng::SeedSpec;
