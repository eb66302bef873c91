//! Granger-causal recourse for multivariate time-series anomalies.
//!
//! The pipeline has three learned stages and a counterfactual engine tying
//! them together:
//!
//! 1. a generalized vector autoregression ([`gvar`]) whose per-lag
//!    coefficient matrices are produced by small neural networks, giving both
//!    forecasts and an interpretable Granger-causal structure;
//! 2. anomaly scorers ([`detector`]) with an empirical-quantile threshold;
//! 3. a recourse model ([`recourse`]) that proposes a minimal exogenous
//!    intervention at a detected step, then verifies it by abducting noise
//!    from the observed trace and replaying the dynamics counterfactually.
//!
//! [`synth`] generates the benchmark systems (a linear SCM and a
//! Lotka-Volterra food web) with ground-truth anomaly injections, [`eval`]
//! runs end-to-end experiments, and [`baselines`] holds the alternative
//! action policies the recourse model is compared against.

pub mod baselines;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gvar;
pub mod io;
pub mod series;
pub mod synth;
pub mod nn;
pub mod recourse;
pub mod tape;

pub use error::{Error, Result};
