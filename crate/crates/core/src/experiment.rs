//! Rate and cost studies.
//!
//! [`estimate_strong_rates`] measures how fast the coupled fine/coarse
//! filters converge together as the step size shrinks, using two
//! diagnostics: the sample variance of the final-step increment, and the
//! fraction `1 − p_l(n)` of pairs that have lost their common ancestry.
//! [`mse_vs_cost`] runs plain or multilevel filters at increasing maximum
//! level and fits `ln cost` against `ln MSE`.
//!
//! Every (level, repetition) cell draws from `key.child(level).child(rep)`
//! and results are reduced in cell order, so outputs do not depend on the
//! number of worker threads.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::pf_run;
use crate::kernel::LevelIndex;
use crate::model::{ModelSpec, Observation};
use crate::multilevel::{coupled_pf_run, level_allocation, mlpf_run, AllocationMode, LevelAllocation};
use crate::oracle::Reference;
use crate::rng::StreamKey;

/// Environment variable overriding the worker-pool size.
pub const WORKERS_ENV: &str = "MLPF_WORKERS";

/// Sizes the global worker pool from [`WORKERS_ENV`], if set. Calling it
/// after the pool has started is a no-op.
pub fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?;
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

/// Ordinary least-squares fit of `ln y = intercept + slope · ln x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (`NaN` with exactly two points).
    pub slope_stderr: f64,
}

pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(Error::Domain(format!("need at least 3 points for a fit, got {}", points.len())));
    }
    if let Some(&(x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(Error::Domain(format!("log-log fit needs positive finite values, got ({x}, {y})")));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("log-log fit needs distinct abscissae".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let slope_stderr = (rss / (n - 2.0) / sxx).sqrt();
    Ok(LogLogFit { slope, intercept, slope_stderr })
}

/// Exact Euler-step count of one multilevel run over `n_steps` observations:
/// `n (N₀ + Σ_{l≥1} N_l (2^l + 2^{l−1}))`.
pub fn cost_model(alloc: &LevelAllocation, n_steps: usize) -> u64 {
    let per_step: u64 =
        alloc.levels().zip(&alloc.particles).map(|(l, &n)| n as u64 * l.coupled_steps()).sum();
    per_step * n_steps as u64
}

/// A diagnostic measured per level, with its power-law fit against `h_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSeries {
    pub levels: Vec<u32>,
    pub step_sizes: Vec<f64>,
    pub values: Vec<f64>,
    pub repetitions: usize,
    /// `None` when fewer than three positive values were available.
    pub fit: Option<LogLogFit>,
}

impl RateSeries {
    fn new(levels: Vec<u32>, step_sizes: Vec<f64>, values: Vec<f64>, repetitions: usize) -> Self {
        let points: Vec<(f64, f64)> =
            step_sizes.iter().zip(&values).filter(|(_, v)| **v > 0.0).map(|(h, v)| (*h, *v)).collect();
        let fit = fit_loglog_slope(&points).ok();
        RateSeries { levels, step_sizes, values, repetitions, fit }
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSettings {
    pub max_level: u32,
    pub repetitions: usize,
    /// Particles per coupled filter, the same at every level.
    pub particles: usize,
    pub ess_fraction: f64,
}

/// Both strong-rate diagnostics of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongRates {
    /// Sample variance of the final-step increment `A_{l,n}`.
    pub variance: RateSeries,
    /// Mean of `1 − p_l(n)` at the final step.
    pub coupling: RateSeries,
    /// Mean of `1 − p_l` averaged over all steps.
    pub coupling_step_mean: Vec<f64>,
    /// Levels that failed, with the reason.
    pub failures: Vec<(u32, String)>,
}

/// Runs `repetitions` coupled filters at each level `1..=max_level`.
pub fn estimate_strong_rates(
    model: &ModelSpec,
    obs: &[Observation],
    settings: RateSettings,
    key: StreamKey,
) -> Result<StrongRates> {
    if settings.max_level < 3 {
        return Err(Error::Config("strong-rate study needs max_level >= 3".into()));
    }
    if settings.repetitions < 10 {
        return Err(Error::Config("strong-rate study needs at least 10 repetitions".into()));
    }
    let cells: Vec<(u32, usize)> =
        (1..=settings.max_level).flat_map(|l| (0..settings.repetitions).map(move |r| (l, r))).collect();
    let results: Vec<Result<(f64, f64, f64)>> = cells
        .par_iter()
        .map(|&(l, r)| {
            let out = coupled_pf_run(
                model,
                obs,
                LevelIndex(l),
                settings.particles,
                settings.ess_fraction,
                key.child(l as u64).child(r as u64),
            )?;
            let last = *out.increments.last().ok_or_else(|| Error::Config("no observations".into()))?;
            Ok((last, 1.0 - out.final_coupled_fraction(), 1.0 - out.mean_coupled_fraction()))
        })
        .collect();

    let mut levels = Vec::new();
    let mut step_sizes = Vec::new();
    let mut variances = Vec::new();
    let mut decoupled = Vec::new();
    let mut decoupled_mean = Vec::new();
    let mut failures = Vec::new();
    for (i, l) in (1..=settings.max_level).enumerate() {
        let chunk = &results[i * settings.repetitions..(i + 1) * settings.repetitions];
        if let Some(Err(e)) = chunk.iter().find(|r| r.is_err()) {
            failures.push((l, e.to_string()));
            continue;
        }
        let vals: Vec<(f64, f64, f64)> = chunk.iter().map(|r| *r.as_ref().unwrap()).collect();
        let r = vals.len() as f64;
        let mean = vals.iter().map(|v| v.0).sum::<f64>() / r;
        let var = vals.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (r - 1.0);
        levels.push(l);
        step_sizes.push(LevelIndex(l).step_size(model.delta()));
        variances.push(var);
        decoupled.push(vals.iter().map(|v| v.1).sum::<f64>() / r);
        decoupled_mean.push(vals.iter().map(|v| v.2).sum::<f64>() / r);
    }
    Ok(StrongRates {
        variance: RateSeries::new(levels.clone(), step_sizes.clone(), variances, settings.repetitions),
        coupling: RateSeries::new(levels, step_sizes, decoupled, settings.repetitions),
        coupling_step_mean: decoupled_mean,
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Single-level particle filter with `N = 2^{2L}` particles at level `L`.
    Pf,
    /// Multilevel particle filter with the default allocation for `L`.
    Mlpf,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pf => "PF",
            Method::Mlpf => "MLPF",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pf" => Ok(Method::Pf),
            "mlpf" => Ok(Method::Mlpf),
            _ => Err(Error::Config(format!("unknown method `{s}` (expected pf or mlpf)"))),
        }
    }
}

/// Particle count of the single-level filter at level `L`: `2^{2L}`.
pub fn pf_particles(level: u32) -> usize {
    1usize << (2 * level)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSettings {
    pub min_level: u32,
    pub max_level: u32,
    pub repetitions: usize,
    pub ess_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub level: u32,
    /// Final-step mean squared error against the truth.
    pub mse: f64,
    /// Euler steps per run.
    pub cost: u64,
    /// Mean wall-clock seconds per run.
    pub walltime: f64,
    /// Per-step MSE.
    pub mse_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub method: Method,
    pub rows: Vec<CostRow>,
    /// Fit of `ln cost` on `ln MSE`.
    pub fit: LogLogFit,
}

/// Runs `repetitions` filters of `method` at each maximum level and fits the
/// cost rate against the final-step MSE.
pub fn mse_vs_cost(
    model: &ModelSpec,
    obs: &[Observation],
    method: Method,
    settings: CostSettings,
    truth: &Reference,
    key: StreamKey,
) -> Result<ExperimentResult> {
    if truth.values.len() != obs.len() {
        return Err(Error::Config(format!(
            "truth has {} steps but there are {} observations",
            truth.values.len(),
            obs.len()
        )));
    }
    if settings.min_level < 1 || settings.max_level < settings.min_level + 2 {
        return Err(Error::Config("cost study needs levels min >= 1 and at least 3 levels".into()));
    }
    if settings.repetitions < 2 {
        return Err(Error::Config("cost study needs at least 2 repetitions".into()));
    }
    let n = obs.len();
    let mut rows = Vec::new();
    for level in settings.min_level..=settings.max_level {
        let alloc = match method {
            Method::Pf => None,
            Method::Mlpf => Some(level_allocation(level, model, AllocationMode::Defaults)?),
        };
        let level_key = key.child(level as u64);
        let runs: Vec<Result<(Vec<f64>, u64, f64)>> = (0..settings.repetitions)
            .into_par_iter()
            .map(|r| {
                let start = Instant::now();
                let rep_key = level_key.child(r as u64);
                let (est, cost) = match &alloc {
                    None => {
                        let out = pf_run(model, obs, LevelIndex(level), pf_particles(level), settings.ess_fraction, rep_key)?;
                        (out.filter, out.cost)
                    }
                    Some(alloc) => {
                        let out = mlpf_run(model, obs, alloc, settings.ess_fraction, rep_key)?;
                        (out.estimates, out.cost)
                    }
                };
                Ok((est, cost, start.elapsed().as_secs_f64()))
            })
            .collect();
        let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
        let r = runs.len() as f64;
        let mse_trace: Vec<f64> = (0..n)
            .map(|m| runs.iter().map(|(est, _, _)| (est[m] - truth.values[m]).powi(2)).sum::<f64>() / r)
            .collect();
        let cost = runs[0].1;
        rows.push(CostRow {
            level,
            mse: mse_trace[n - 1],
            cost,
            walltime: runs.iter().map(|x| x.2).sum::<f64>() / r,
            mse_trace,
        });
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|row| (row.mse, row.cost as f64)).collect();
    let fit = fit_loglog_slope(&points)?;
    Ok(ExperimentResult { method, rows, fit })
}

/// Averages rate studies run on independent datasets level by level and refits.
/// Levels that failed in any study are dropped.
pub fn pool_rates(studies: &[StrongRates]) -> Result<StrongRates> {
    let first = studies.first().ok_or_else(|| Error::Config("nothing to pool".into()))?;
    let mut levels = Vec::new();
    let mut step_sizes = Vec::new();
    let mut variances = Vec::new();
    let mut decoupled = Vec::new();
    let mut decoupled_mean = Vec::new();
    for (i, &l) in first.variance.levels.iter().enumerate() {
        let idx: Option<Vec<usize>> =
            studies.iter().map(|s| s.variance.levels.iter().position(|&x| x == l)).collect();
        let Some(idx) = idx else { continue };
        let d = studies.len() as f64;
        let avg = |f: &dyn Fn(&StrongRates, usize) -> f64| studies.iter().zip(&idx).map(|(s, &j)| f(s, j)).sum::<f64>() / d;
        levels.push(l);
        step_sizes.push(first.variance.step_sizes[i]);
        variances.push(avg(&|s, j| s.variance.values[j]));
        decoupled.push(avg(&|s, j| s.coupling.values[j]));
        decoupled_mean.push(avg(&|s, j| s.coupling_step_mean[j]));
    }
    let repetitions = studies.iter().map(|s| s.variance.repetitions).sum();
    Ok(StrongRates {
        variance: RateSeries::new(levels.clone(), step_sizes.clone(), variances, repetitions),
        coupling: RateSeries::new(levels, step_sizes, decoupled, repetitions),
        coupling_step_mean: decoupled_mean,
        failures: studies.iter().flat_map(|s| s.failures.iter().cloned()).collect(),
    })
}

/// Averages cost studies run on independent datasets (same method and levels)
/// and refits the slope on the pooled MSE.
pub fn pool_cost(studies: &[ExperimentResult]) -> Result<ExperimentResult> {
    let first = studies.first().ok_or_else(|| Error::Config("nothing to pool".into()))?;
    if studies.iter().any(|s| s.method != first.method || s.rows.len() != first.rows.len()) {
        return Err(Error::Config("pooled cost studies must share method and levels".into()));
    }
    let d = studies.len() as f64;
    let rows: Vec<CostRow> = (0..first.rows.len())
        .map(|i| {
            let n = first.rows[i].mse_trace.len();
            CostRow {
                level: first.rows[i].level,
                mse: studies.iter().map(|s| s.rows[i].mse).sum::<f64>() / d,
                cost: first.rows[i].cost,
                walltime: studies.iter().map(|s| s.rows[i].walltime).sum::<f64>() / d,
                mse_trace: (0..n).map(|m| studies.iter().map(|s| s.rows[i].mse_trace[m]).sum::<f64>() / d).collect(),
            }
        })
        .collect();
    let points: Vec<(f64, f64)> = rows.iter().map(|row| (row.mse, row.cost as f64)).collect();
    let fit = fit_loglog_slope(&points)?;
    Ok(ExperimentResult { method: first.method, rows, fit })
}
