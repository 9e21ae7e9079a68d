//! Bayesian stochastic volatility regression for multi-subject functional
//! data.
//!
//! Group mean curves and subject deviation curves carry integrated-Wiener
//! (SDE-induced Gaussian process) priors; each subject's deviation has its
//! own volatility whose logarithm is regressed on covariates. Posterior
//! sampling runs on exact state-space discretizations ([`statespace`],
//! [`smoother`]); [`gp_kernels`] holds the equivalent dense kernels and
//! [`spline`] the penalized-spline counterpart.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod gp_kernels;
pub mod rng;
pub mod sampler;
pub mod simulate;
pub mod smoother;
pub mod spline;
pub mod statespace;

pub use data::{ingest, Dataset, Subject};
pub use error::{Result, SvrError};
pub use sampler::{run_chain, summarize, ChainState, ModelConfig, PosteriorDraws, Sampler};
pub use smoother::{kalman_filter, kalman_smooth, simulation_smoother, LinearGaussianSsm};
pub use statespace::{process_noise, transition_matrix, Transition};
