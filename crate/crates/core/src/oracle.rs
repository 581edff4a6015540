//! Ground truth for the filtering experiments.
//!
//! The OU model and the log of the GBM model are linear-Gaussian, so their
//! filtering distributions follow from a scalar Kalman recursion on the exact
//! (not Euler-discretized) transition. For the other models a high-level
//! particle filter, averaged over independent seeds, stands in for the truth.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::pf_run;
use crate::kernel::LevelIndex;
use crate::model::{validate_observations, Diffusion, Drift, ModelSpec, ObsDensity, Observation};
use crate::rng::StreamKey;

/// Gaussian filtering distribution at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub mean: f64,
    pub variance: f64,
}

fn kalman_update(prior: KalmanState, y: f64, obs_var: f64) -> KalmanState {
    let gain = prior.variance / (prior.variance + obs_var);
    KalmanState { mean: prior.mean + gain * (y - prior.mean), variance: (1.0 - gain) * prior.variance }
}

/// Exact filter for the OU model observed in Gaussian noise, starting from a
/// point mass at `x₀`.
pub fn kalman_ou(model: &ModelSpec, obs: &[Observation]) -> Result<Vec<KalmanState>> {
    let (theta, mu) = match *model.drift_fn() {
        Drift::MeanReverting { theta, mu } => (theta, mu),
        _ => return Err(Error::Contract("kalman_ou needs a mean-reverting drift".into())),
    };
    let sigma = match *model.diffusion_fn() {
        Diffusion::Constant(s) => s,
        _ => return Err(Error::Contract("kalman_ou needs a constant diffusion".into())),
    };
    let obs_var = match *model.obs_density() {
        ObsDensity::Gaussian { var } => var,
        _ => return Err(Error::Contract("kalman_ou needs Gaussian observations".into())),
    };
    validate_observations(obs)?;
    let (a, q) = ou_transition(theta, sigma, model.delta());
    let mut state = KalmanState { mean: model.initial_state(), variance: 0.0 };
    Ok(obs
        .iter()
        .map(|o| {
            let prior = KalmanState { mean: mu + a * (state.mean - mu), variance: a * a * state.variance + q };
            state = kalman_update(prior, o.value, obs_var);
            state
        })
        .collect())
}

/// Exact OU transition over `δ`: coefficient `e^{−θδ}` and variance
/// `σ²(1 − e^{−2θδ})/(2θ)` (or `σ²δ` when `θ = 0`).
pub fn ou_transition(theta: f64, sigma: f64, delta: f64) -> (f64, f64) {
    let a = (-theta * delta).exp();
    let q = if theta.abs() < 1e-12 {
        sigma * sigma * delta
    } else {
        sigma * sigma * (-(-2.0 * theta * delta).exp_m1()) / (2.0 * theta)
    };
    (a, q)
}

/// Filtering distribution of `Z = ln X` for GBM, plus `E[X | y]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbmPosterior {
    pub log_state: KalmanState,
    /// `exp(mean + variance / 2)`.
    pub mean: f64,
}

/// Exact filter for GBM observed through `N(ln x, τ²)`.
pub fn kalman_gbm(model: &ModelSpec, obs: &[Observation]) -> Result<Vec<GbmPosterior>> {
    let mu = match *model.drift_fn() {
        Drift::Exponential { mu } => mu,
        _ => return Err(Error::Contract("kalman_gbm needs an exponential drift".into())),
    };
    let sigma = match *model.diffusion_fn() {
        Diffusion::Proportional(s) => s,
        _ => return Err(Error::Contract("kalman_gbm needs a proportional diffusion".into())),
    };
    let obs_var = match *model.obs_density() {
        ObsDensity::LogGaussian { var } => var,
        _ => return Err(Error::Contract("kalman_gbm needs log-Gaussian observations".into())),
    };
    let x0 = model.initial_state();
    if x0 <= 0.0 {
        return Err(Error::Domain(format!("GBM needs a positive initial state, got {x0}")));
    }
    validate_observations(obs)?;
    let delta = model.delta();
    let drift = (mu - 0.5 * sigma * sigma) * delta;
    let q = sigma * sigma * delta;
    let mut state = KalmanState { mean: x0.ln(), variance: 0.0 };
    Ok(obs
        .iter()
        .map(|o| {
            let prior = KalmanState { mean: state.mean + drift, variance: state.variance + q };
            state = kalman_update(prior, o.value, obs_var);
            GbmPosterior { log_state: state, mean: (state.mean + 0.5 * state.variance).exp() }
        })
        .collect())
}

/// Per-step reference values with their Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl Reference {
    /// Exact values (zero standard error).
    pub fn exact(values: Vec<f64>) -> Self {
        let stderr = vec![0.0; values.len()];
        Reference { values, stderr }
    }

    /// Writes `step,value,stderr` rows to `path`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(file)
    }

    /// Reads a file written by [`Reference::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let mut out = Reference { values: Vec::new(), stderr: Vec::new() };
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Ingest { row: row + 2, message: format!("bad field {i}") })
            };
            out.values.push(field(1)?);
            out.stderr.push(field(2)?);
        }
        Ok(out)
    }

    /// Writes `step,value,stderr` rows.
    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "value", "stderr"])?;
        for (i, (v, s)) in self.values.iter().zip(&self.stderr).enumerate() {
            w.write_record([(i + 1).to_string(), v.to_string(), s.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<reference>", e))?;
        Ok(())
    }
}

/// Settings for [`reference_pf`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSettings {
    pub level: u32,
    pub particles: usize,
    pub seeds: usize,
    pub ess_fraction: f64,
}

impl Default for ReferenceSettings {
    fn default() -> Self {
        ReferenceSettings { level: 9, particles: 100_000, seeds: 10, ess_fraction: 0.25 }
    }
}

/// Average of `seeds` independent particle filters at a fine level, with the
/// standard error of that average. Seed `s` uses `key.child(s)`.
pub fn reference_pf(
    model: &ModelSpec,
    obs: &[Observation],
    settings: ReferenceSettings,
    key: StreamKey,
) -> Result<Reference> {
    if settings.seeds < 2 {
        return Err(Error::Config("reference filter needs at least 2 seeds".into()));
    }
    let runs: Vec<Vec<f64>> = (0..settings.seeds)
        .into_par_iter()
        .map(|s| {
            pf_run(model, obs, LevelIndex(settings.level), settings.particles, settings.ess_fraction, key.child(s as u64))
                .map(|out| out.filter)
        })
        .collect::<Result<_>>()?;
    let r = runs.len() as f64;
    let mut values = Vec::with_capacity(obs.len());
    let mut stderr = Vec::with_capacity(obs.len());
    for step in 0..obs.len() {
        let mean = runs.iter().map(|run| run[step]).sum::<f64>() / r;
        let var = runs.iter().map(|run| (run[step] - mean).powi(2)).sum::<f64>() / (r - 1.0);
        values.push(mean);
        stderr.push((var / r).sqrt());
    }
    Ok(Reference { values, stderr })
}

/// Where a [`Reference`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthSource {
    KalmanOu,
    KalmanGbm,
    ReferencePf,
}

impl TruthSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TruthSource::KalmanOu => "kalman_ou",
            TruthSource::KalmanGbm => "kalman_gbm",
            TruthSource::ReferencePf => "reference_pf",
        }
    }
}

/// Filter means of `model`: exact when a Kalman recursion applies to the
/// model's structure, otherwise [`reference_pf`].
pub fn filter_truth(
    model: &ModelSpec,
    obs: &[Observation],
    settings: ReferenceSettings,
    key: StreamKey,
) -> Result<(Reference, TruthSource)> {
    if let Ok(post) = kalman_ou(model, obs) {
        return Ok((Reference::exact(post.iter().map(|k| k.mean).collect()), TruthSource::KalmanOu));
    }
    if let Ok(post) = kalman_gbm(model, obs) {
        return Ok((Reference::exact(post.iter().map(|k| k.mean).collect()), TruthSource::KalmanGbm));
    }
    Ok((reference_pf(model, obs, settings, key)?, TruthSource::ReferencePf))
}
