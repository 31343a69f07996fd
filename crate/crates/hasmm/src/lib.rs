//! Hidden absorbing semi-Markov model (HASMM) toolkit.
//!
//! A continuous-time latent chain moves through `N` states: state 1 is a
//! safe absorbing state, state `N` a catastrophic absorbing state, and the
//! states in between are transient with Gamma sojourns and duration-dependent
//! transition probabilities. Observations are multi-task Gaussian-process
//! segments sampled at Poisson times, censored when the chain absorbs.
//!
//! The crate covers the full pipeline:
//!
//! - [`params`] / [`model`]: the parameter bundle and the semi-Markov kernels;
//! - [`emission`]: GP segment covariances, densities, and sampling;
//! - [`generate`]: synthetic episode simulation;
//! - [`volterra`]: the interval transition-probability tensor, solved as a
//!   Volterra integral-equation fixed point with FFT convolutions;
//! - [`filter`]: lagged forward messages, state posteriors, and risk scores
//!   over irregularly sampled episode prefixes;
//! - [`learn`]: trajectory samplers and Monte Carlo EM parameter estimation;
//! - [`eval`]: detection metrics and independent oracles (matrix exponential,
//!   exhaustive enumeration) used by the test suites.
//!
//! States are 0-indexed in code; JSON episode files use 1-based labels.

pub mod emission;
pub mod error;
pub mod eval;
pub mod filter;
pub mod generate;
pub mod io;
pub mod learn;
pub mod logspace;
pub mod model;
pub mod params;
pub mod volterra;

pub use error::{Error, Result};
pub use params::{GammaSojourn, GpHyper, ParameterSet, StateClass};
