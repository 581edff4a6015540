//! Single-level bootstrap particle filter with adaptive resampling.
//!
//! Particles are propagated with the level-`l` Euler kernel, reweighted by the
//! observation density and resampled multinomially whenever the effective
//! sample size drops below `ess_fraction · N`. Between resampling events the
//! log-weights accumulate. Estimates at each step are taken from the weighted
//! cloud before any resampling.

use crate::error::{Error, Result};
use crate::kernel::{simulate_transition, LevelIndex};
use crate::model::{validate_observations, ModelSpec, Observation};
use crate::resampling::{ess, multinomial_resample, normalize_into, WeightVector};
use crate::rng::{NoiseSource, StreamKey};
use rand::Rng;

/// Sub-stream used for Euler increments.
pub const ROLE_MUTATION: u64 = 0;
/// Sub-stream used for resampling draws.
pub const ROLE_RESAMPLING: u64 = 1;

/// Weighted particle approximation at one level.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    states: Vec<f64>,
    log_weights: Vec<f64>,
    level: LevelIndex,
    step: usize,
    clamped: u64,
    capped: u64,
}

impl ParticleCloud {
    /// Equally weighted particles at the given states.
    pub fn new(states: Vec<f64>, level: LevelIndex) -> Self {
        let n = states.len();
        ParticleCloud { states, log_weights: vec![0.0; n], level, step: 0, clamped: 0, capped: 0 }
    }

    /// `n` particles at the model's initial state.
    pub fn at_initial_state(model: &ModelSpec, n: usize, level: LevelIndex) -> Self {
        Self::new(vec![model.initial_state(); n], level)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn level(&self) -> LevelIndex {
        self.level
    }

    /// Number of observation steps absorbed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Observation-density evaluations at clamped (GBM) states.
    pub fn clamp_count(&self) -> u64 {
        self.clamped
    }

    /// Test-function evaluations whose exponent was capped.
    pub fn capped_count(&self) -> u64 {
        self.capped
    }

    pub fn normalized_weights(&self) -> Result<WeightVector> {
        let mut w = Vec::with_capacity(self.len());
        normalize_into(&self.log_weights, &mut w).map_err(|e| e.at(self.level.get(), self.step))?;
        WeightVector::new(w)
    }

    pub fn effective_sample_size(&self) -> Result<f64> {
        Ok(ess(&self.normalized_weights()?))
    }

    /// Weighted mean of `φ` under the current weights.
    pub fn estimate(&mut self, model: &ModelSpec) -> Result<f64> {
        let mut scratch = Vec::new();
        normalize_into(&self.log_weights, &mut scratch).map_err(|e| e.at(self.level.get(), self.step))?;
        let (value, capped) = weighted_mean(&scratch, &self.states, model);
        self.capped += capped;
        Ok(value)
    }

    /// Propagates every particle across one observation interval.
    pub fn mutate<N: NoiseSource + ?Sized>(&mut self, model: &ModelSpec, noise: &mut N) -> Result<()> {
        for x in &mut self.states {
            *x = simulate_transition(model, *x, self.level, noise)?;
        }
        Ok(())
    }

    /// Multiplies the weights by `G(y, ·)` and returns
    /// `ln Σᵢ wᵢ G(y, Uᵢ)` with `w` the normalized weights before the update.
    pub fn reweight(&mut self, model: &ModelSpec, y: f64) -> Result<f64> {
        self.step += 1;
        let degenerate = || Error::DegenerateWeights { level: self.level.get(), step: self.step };
        let prev_max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut prev_total = 0.0;
        let mut new_total = 0.0;
        let mut new_max = f64::NEG_INFINITY;
        let obs = model.obs_density();
        // Two passes: first accumulate with the pre-update maximum, then rescale.
        let mut increments = Vec::with_capacity(self.len());
        for (lw, &x) in self.log_weights.iter().zip(&self.states) {
            let (g, clamped) = obs.log_density(y, x);
            self.clamped += clamped as u64;
            if g.is_nan() {
                return Err(degenerate());
            }
            prev_total += (lw - prev_max).exp();
            increments.push(g);
            new_max = new_max.max(lw + g);
        }
        for (lw, g) in self.log_weights.iter_mut().zip(&increments) {
            *lw += g;
            new_total += (*lw - new_max).exp();
        }
        if !(new_max.is_finite() && new_total > 0.0 && prev_total > 0.0) {
            return Err(degenerate());
        }
        // ln Σ wᵢ Gᵢ = ln Σ exp(lwᵢ + gᵢ) − ln Σ exp(lwᵢ)
        let log_increment = new_max + new_total.ln() - prev_max - prev_total.ln();
        for lw in &mut self.log_weights {
            *lw -= new_max;
        }
        Ok(log_increment)
    }

    /// Replaces the cloud by a multinomial resample and resets the weights.
    pub fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let w = self.normalized_weights()?;
        let idx = multinomial_resample(&w, rng);
        self.states = idx.iter().map(|&i| self.states[i]).collect();
        self.log_weights.iter_mut().for_each(|lw| *lw = 0.0);
        Ok(())
    }
}

/// `Σ wᵢ φ(xᵢ) / Σ wᵢ`, plus the number of capped evaluations. Dividing by
/// the computed sum makes `φ ≡ 1` return exactly one.
pub(crate) fn weighted_mean(weights: &[f64], states: &[f64], model: &ModelSpec) -> (f64, u64) {
    let phi = model.test_function();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut capped = 0;
    for (&w, &x) in weights.iter().zip(states) {
        let (v, c) = phi.eval(x);
        capped += c as u64;
        num += w * v;
        den += w;
    }
    (num / den, capped)
}

/// Resampling is always triggered at `ess_fraction ≥ 1`.
#[inline]
pub(crate) fn should_resample(ess_value: f64, ess_fraction: f64, n: usize) -> bool {
    ess_fraction >= 1.0 || ess_value < ess_fraction * n as f64
}

pub(crate) fn check_run_args(obs: &[Observation], n: usize, ess_fraction: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 particles, got {n}")));
    }
    if !(ess_fraction > 0.0 && ess_fraction <= 1.0) {
        return Err(Error::Config(format!("ess_fraction must lie in (0, 1], got {ess_fraction}")));
    }
    validate_observations(obs)
}

/// Result of [`pf_run`].
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub level: LevelIndex,
    pub particles: usize,
    /// Predictor estimates `η_m(φ)`, one per observation.
    pub predictor: Vec<f64>,
    /// Filter estimates `η̂_m(φ)`, one per observation.
    pub filter: Vec<f64>,
    /// Running `ln Ẑ_m` after each observation.
    pub log_z_trace: Vec<f64>,
    pub log_normalizing_constant: f64,
    pub resampled: Vec<bool>,
    /// ESS after reweighting, before resampling.
    pub ess: Vec<f64>,
    /// Total Euler steps.
    pub cost: u64,
    pub clamp_count: u64,
    pub capped_count: u64,
    /// Final cloud, after the last resampling decision.
    pub cloud: ParticleCloud,
}

/// Runs a bootstrap particle filter at `level` with `n` particles.
///
/// Euler increments come from `key.child(ROLE_MUTATION)` and resampling draws
/// from `key.child(ROLE_RESAMPLING)`.
pub fn pf_run(
    model: &ModelSpec,
    obs: &[Observation],
    level: LevelIndex,
    n: usize,
    ess_fraction: f64,
    key: StreamKey,
) -> Result<FilterOutput> {
    check_run_args(obs, n, ess_fraction)?;
    let mut mutation = key.child(ROLE_MUTATION).stream();
    let mut resampling = key.child(ROLE_RESAMPLING).stream();
    let mut cloud = ParticleCloud::at_initial_state(model, n, level);
    let steps = obs.len();
    let mut out = FilterOutput {
        level,
        particles: n,
        predictor: Vec::with_capacity(steps),
        filter: Vec::with_capacity(steps),
        log_z_trace: Vec::with_capacity(steps),
        log_normalizing_constant: 0.0,
        resampled: Vec::with_capacity(steps),
        ess: Vec::with_capacity(steps),
        cost: 0,
        clamp_count: 0,
        capped_count: 0,
        cloud: ParticleCloud::new(Vec::new(), level),
    };
    let mut log_z = 0.0;
    for o in obs {
        cloud.mutate(model, &mut mutation)?;
        out.cost += n as u64 * level.steps();
        out.predictor.push(cloud.estimate(model)?);
        log_z += cloud.reweight(model, o.value)?;
        out.log_z_trace.push(log_z);
        out.filter.push(cloud.estimate(model)?);
        let ess_value = cloud.effective_sample_size()?;
        out.ess.push(ess_value);
        let resample = should_resample(ess_value, ess_fraction, n);
        if resample {
            cloud.resample(&mut resampling)?;
        }
        out.resampled.push(resample);
    }
    out.log_normalizing_constant = log_z;
    out.clamp_count = cloud.clamp_count();
    out.capped_count = cloud.capped_count();
    out.cloud = cloud;
    Ok(out)
}

/// `Ẑ = Π_p η_p^N(G_p)` from a completed run.
pub fn normalizing_constant(output: &FilterOutput) -> f64 {
    output.log_normalizing_constant.exp()
}

/// Filter estimate obtained by reweighting `cloud` with observation `y`,
/// leaving the cloud untouched.
pub fn filter_estimate(cloud: &ParticleCloud, model: &ModelSpec, y: f64) -> Result<f64> {
    let mut next = cloud.clone();
    next.reweight(model, y)?;
    next.estimate(model)
}
