//! Multilevel particle filters for partially observed diffusions.
//!
//! A [`ModelSpec`] describes a scalar SDE observed at times `δ, 2δ, …` through
//! a likelihood. [`pf_run`] is a bootstrap particle filter on an Euler grid of
//! step `δ 2^-l`; [`mlpf_run`] combines one such filter with coupled fine/coarse
//! filters on finer grids and sums the level differences.
//!
//! ```
//! use mlpf::{builtin, level_allocation, mlpf_run, observations, AllocationMode, ModelName, StreamKey};
//!
//! let model = builtin(ModelName::Ou, &[]).unwrap();
//! let obs = observations(&[0.1, -0.3, 0.2]);
//! let alloc = level_allocation(3, &model, AllocationMode::Defaults).unwrap();
//! let out = mlpf_run(&model, &obs, &alloc, 0.25, StreamKey::new(7)).unwrap();
//! assert_eq!(out.estimates.len(), 3);
//! ```

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod kernel;
pub mod model;
pub mod multilevel;
pub mod oracle;
pub mod resampling;
pub mod rng;

pub use config::{Command, ExperimentConfig};
pub use data::{ingest_returns, read_observations, simulate_dataset, Dataset, ReturnSeries};
pub use error::{Error, Result};
pub use experiment::{
    pool_cost, pool_rates,
    cost_model, estimate_strong_rates, fit_loglog_slope, mse_vs_cost, CostSettings, LogLogFit, Method,
    RateSettings, StrongRates,
};
pub use filter::{filter_estimate, normalizing_constant, pf_run, FilterOutput, ParticleCloud};
pub use kernel::{euler_step, simulate_coupled_transition, simulate_transition, LevelIndex};
pub use model::{builtin, builtin_model, observations, ModelName, ModelSpec, Observation};
pub use multilevel::{
    coupled_pf_run, increment_estimate, level_allocation, mlpf_run, AllocationMode, AllocationVariant,
    CoupledFilterOutput, LevelAllocation, MlpfOutput,
};
pub use oracle::{
    filter_truth, kalman_gbm, kalman_ou, reference_pf, KalmanState, Reference, ReferenceSettings, TruthSource,
};
pub use resampling::{coupled_resample, coupling_probability, ess, multinomial_resample, normalize_weights};
pub use rng::{NoiseSource, StreamKey};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod ch01_introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod ch02_models {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod ch03_kernels {}
    #[doc = include_str!("../../../book/src/resampling.md")]
    mod ch04_resampling {}
    #[doc = include_str!("../../../book/src/filters.md")]
    mod ch05_filters {}
    #[doc = include_str!("../../../book/src/multilevel.md")]
    mod ch06_multilevel {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod ch07_oracles {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod ch08_experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod ch09_cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
