//! Online Bayesian identification of time-varying FIR systems.
//!
//! The impulse response is given a zero-mean Gaussian prior with a TC
//! (tuned/correlated) covariance. Data arrive in blocks; every block updates
//! exponentially weighted sufficient statistics, re-estimates the noise
//! variance from a least-squares fit, takes a single scaled gradient
//! projection step on the negative log marginal likelihood and recomputes the
//! posterior mean. The forgetting factor is either fixed or estimated jointly
//! with the kernel hyper-parameters.
//!
//! Modules, bottom-up:
//!
//! - [`stats`]: FIR regressors and (weighted) sufficient statistics.
//! - [`kernel`]: TC kernel, Cholesky factor, derivatives, feasible box.
//! - [`likelihood`]: marginal likelihood, gradients, LS noise variance.
//! - [`sgp`]: one-step and run-to-convergence scaled gradient projection.
//! - [`estimators`]: the online estimators and the RLS baseline.
//! - [`simulator`]: random stable systems, band-limited inputs, scenarios.
//! - [`metrics`]: impulse-response fit and Monte-Carlo aggregation.
//! - [`experiment`]: study configuration, execution and result files.
//! - [`oracle`], [`validate`]: dense reference computations and the checks
//!   built on them.

pub mod error;
pub mod estimators;
pub mod experiment;
pub mod kernel;
pub mod likelihood;
pub mod metrics;
pub mod oracle;
pub mod sgp;
pub mod simulator;
pub mod stats;
pub mod validate;

pub use error::{Error, Result};
