//! The multilevel particle filter.
//!
//! Level 0 runs a plain particle filter. Each level `l ≥ 1` runs a coupled
//! pair of filters, fine at level `l` and coarse at level `l − 1`, driven by
//! shared Euler increments and resampled jointly with
//! [`coupled_resample`](crate::resampling::coupled_resample). The increment
//! estimate at step `m`,
//!
//! ```text
//! A_{l,m}(φ) = Σᵢ w₁ⁱ φ(U₁ⁱ) − Σᵢ w₂ⁱ φ(U₂ⁱ),
//! ```
//!
//! telescopes over levels into the multilevel estimate
//! `η̂^{ML}_m(φ) = Σ_{l=0}^{L} A_{l,m}(φ)`, where level 0 contributes its
//! plain filter estimate.
//!
//! Every level draws from its own sub-stream `key.child(l)`, so adding levels
//! never changes the randomness seen by lower ones.

use crate::error::{Error, Result};
use crate::filter::{check_run_args, pf_run, should_resample, weighted_mean, FilterOutput, ROLE_MUTATION, ROLE_RESAMPLING};
use crate::kernel::{simulate_coupled_transition, LevelIndex};
use crate::model::{ModelSpec, Observation};
use crate::resampling::{coupled_resample, ess, normalize_into};
use crate::rng::StreamKey;

/// Which particle-count schedule applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationVariant {
    /// `β = 2`: `N_{0,L} = 2^{2L} L`.
    ConstantDiffusion,
    /// `β = 1`: `N_{0,L} = 2^{9L/4}`.
    General,
}

/// How the top-level particle count is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AllocationMode {
    /// `N_{0,L}` from the variant's formula.
    Defaults,
    /// A caller-supplied `N_{0,L}`.
    ExplicitN0(f64),
}

/// Per-level particle counts of a multilevel run.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAllocation {
    pub max_level: u32,
    /// `N_0, …, N_L`.
    pub particles: Vec<usize>,
    /// Strong rate `β`.
    pub beta: f64,
    /// Cost rate `γ`.
    pub gamma: f64,
    /// Weak rate `α`.
    pub alpha: f64,
    pub variant: AllocationVariant,
    /// Unrounded `N_{0,L}`.
    pub base_particles: f64,
}

impl LevelAllocation {
    /// Allocation with explicit per-level counts. Counts must be at least 2
    /// and non-increasing.
    pub fn explicit(particles: Vec<usize>, variant: AllocationVariant) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::Config("allocation needs at least one level".into()));
        }
        if particles.iter().any(|&n| n < 2) || particles.windows(2).any(|p| p[1] > p[0]) {
            return Err(Error::Config(format!("particle counts must be >= 2 and non-increasing: {particles:?}")));
        }
        let beta = match variant {
            AllocationVariant::ConstantDiffusion => 2.0,
            AllocationVariant::General => 1.0,
        };
        Ok(LevelAllocation {
            max_level: particles.len() as u32 - 1,
            base_particles: particles[0] as f64,
            particles,
            beta,
            gamma: 1.0,
            alpha: 1.0,
            variant,
        })
    }

    pub fn levels(&self) -> impl Iterator<Item = LevelIndex> + '_ {
        (0..=self.max_level).map(LevelIndex)
    }
}

/// Particle counts `N_l = ⌊N_{0,L} 2^{−l(β+2γ)/4}⌋`, floored at 2, with
/// `β = 2` for constant diffusions and `β = 1` otherwise (`γ = 1`).
///
/// Step sizes enter only through the ratio `h_l / h_0 = 2^{−l}`, so the
/// counts do not depend on the observation interval.
pub fn level_allocation(max_level: u32, model: &ModelSpec, mode: AllocationMode) -> Result<LevelAllocation> {
    if max_level < 1 {
        return Err(Error::Config("multilevel allocation needs L >= 1".into()));
    }
    let variant = if model.has_constant_diffusion() {
        AllocationVariant::ConstantDiffusion
    } else {
        AllocationVariant::General
    };
    let (beta, gamma) = match variant {
        AllocationVariant::ConstantDiffusion => (2.0, 1.0),
        AllocationVariant::General => (1.0, 1.0),
    };
    let l = max_level as f64;
    let base = match mode {
        AllocationMode::Defaults => match variant {
            AllocationVariant::ConstantDiffusion => 2f64.powf(2.0 * l) * l,
            AllocationVariant::General => 2f64.powf(2.25 * l),
        },
        AllocationMode::ExplicitN0(n0) => {
            if !(n0 >= 2.0 && n0.is_finite()) {
                return Err(Error::Config(format!("explicit N0 must be >= 2, got {n0}")));
            }
            n0
        }
    };
    let exponent = (beta + 2.0 * gamma) / 4.0;
    let particles = (0..=max_level)
        .map(|lv| {
            let n = (base * 2f64.powf(-(lv as f64) * exponent) + 1e-9).floor();
            (n as usize).max(2)
        })
        .collect();
    Ok(LevelAllocation { max_level, particles, beta, gamma, alpha: 1.0, variant, base_particles: base })
}

/// `Σᵢ w₁ⁱ φ(U₁ⁱ) − Σᵢ w₂ⁱ φ(U₂ⁱ)`. Pass all-zero coarse weights for the
/// level-0 convention.
pub fn increment_estimate(
    fine_weights: &[f64],
    coarse_weights: &[f64],
    fine_states: &[f64],
    coarse_states: &[f64],
    model: &ModelSpec,
) -> Result<f64> {
    let n = fine_weights.len();
    if coarse_weights.len() != n || fine_states.len() != n || coarse_states.len() != n {
        return Err(Error::Contract("increment estimate needs equal-length inputs".into()));
    }
    let phi = model.test_function();
    Ok(fine_weights
        .iter()
        .zip(fine_states)
        .zip(coarse_weights.iter().zip(coarse_states))
        .map(|((w1, x1), (w2, x2))| w1 * phi.eval(*x1).0 - w2 * phi.eval(*x2).0)
        .sum())
}

/// Result of [`coupled_pf_run`] (or of the plain level-0 filter, see
/// [`CoupledFilterOutput::from_level_zero`]).
#[derive(Debug, Clone)]
pub struct CoupledFilterOutput {
    pub level: LevelIndex,
    pub particles: usize,
    /// `A_{l,m}(φ)` per step.
    pub increments: Vec<f64>,
    /// Fine-marginal filter estimates per step.
    pub fine_filter: Vec<f64>,
    /// Coarse-marginal filter estimates per step (zero at level 0).
    pub coarse_filter: Vec<f64>,
    /// Fraction of pairs still sharing every ancestor, after each step.
    pub coupled_fraction: Vec<f64>,
    /// Coupling probability `α` at each resampling event (`NaN` otherwise).
    pub alpha: Vec<f64>,
    pub fine_ess: Vec<f64>,
    pub coarse_ess: Vec<f64>,
    pub resampled: Vec<bool>,
    /// Total Euler steps, fine and coarse.
    pub cost: u64,
}

impl CoupledFilterOutput {
    /// `p_l(n)` at the final step.
    pub fn final_coupled_fraction(&self) -> f64 {
        self.coupled_fraction.last().copied().unwrap_or(1.0)
    }

    /// `p_l` averaged over steps.
    pub fn mean_coupled_fraction(&self) -> f64 {
        if self.coupled_fraction.is_empty() {
            return 1.0;
        }
        self.coupled_fraction.iter().sum::<f64>() / self.coupled_fraction.len() as f64
    }

    /// Wraps a plain level-0 run: increments are its filter estimates.
    pub fn from_level_zero(out: &FilterOutput) -> Self {
        let steps = out.filter.len();
        CoupledFilterOutput {
            level: out.level,
            particles: out.particles,
            increments: out.filter.clone(),
            fine_filter: out.filter.clone(),
            coarse_filter: vec![0.0; steps],
            coupled_fraction: vec![1.0; steps],
            alpha: vec![f64::NAN; steps],
            fine_ess: out.ess.clone(),
            coarse_ess: vec![f64::NAN; steps],
            resampled: out.resampled.clone(),
            cost: out.cost,
        }
    }
}

struct Scratch {
    w: Vec<f64>,
}

/// Accumulates `log G(y, ·)` into `log_w`, returns the normalized weights in
/// `scratch.w`.
fn reweight(model: &ModelSpec, y: f64, states: &[f64], log_w: &mut [f64], scratch: &mut Scratch) -> Result<()> {
    let obs = model.obs_density();
    for (lw, &x) in log_w.iter_mut().zip(states) {
        *lw += obs.log_density(y, x).0;
    }
    let (max, _) = normalize_into(log_w, &mut scratch.w)?;
    log_w.iter_mut().for_each(|lw| *lw -= max);
    Ok(())
}

/// Runs the coupled fine/coarse particle filter at level `l ≥ 1`.
///
/// Resampling is triggered by the coarse ESS. Between triggers both systems
/// accumulate log-weights. A pair leaves the common-ancestry set as soon as
/// it is resampled from the residual (independent) branch, or inherits from
/// a pair that already left it.
pub fn coupled_pf_run(
    model: &ModelSpec,
    obs: &[Observation],
    level: LevelIndex,
    n: usize,
    ess_fraction: f64,
    key: StreamKey,
) -> Result<CoupledFilterOutput> {
    if level.get() == 0 {
        return Err(Error::Contract("coupled filter needs level >= 1".into()));
    }
    check_run_args(obs, n, ess_fraction)?;
    let mut mutation = key.child(ROLE_MUTATION).stream();
    let mut resampling = key.child(ROLE_RESAMPLING).stream();

    let x0 = model.initial_state();
    let mut fine = vec![x0; n];
    let mut coarse = vec![x0; n];
    let mut lw_fine = vec![0.0; n];
    let mut lw_coarse = vec![0.0; n];
    let mut in_common = vec![true; n];
    let mut s1 = Scratch { w: Vec::with_capacity(n) };
    let mut s2 = Scratch { w: Vec::with_capacity(n) };

    let steps = obs.len();
    let mut out = CoupledFilterOutput {
        level,
        particles: n,
        increments: Vec::with_capacity(steps),
        fine_filter: Vec::with_capacity(steps),
        coarse_filter: Vec::with_capacity(steps),
        coupled_fraction: Vec::with_capacity(steps),
        alpha: Vec::with_capacity(steps),
        fine_ess: Vec::with_capacity(steps),
        coarse_ess: Vec::with_capacity(steps),
        resampled: Vec::with_capacity(steps),
        cost: 0,
    };
    let per_particle = level.coupled_steps();
    for (m, o) in obs.iter().enumerate() {
        let step = m + 1;
        for (xf, xc) in fine.iter_mut().zip(coarse.iter_mut()) {
            let (f, c) = simulate_coupled_transition(model, *xf, *xc, level, &mut mutation)?;
            *xf = f;
            *xc = c;
        }
        out.cost += n as u64 * per_particle;

        reweight(model, o.value, &fine, &mut lw_fine, &mut s1).map_err(|e| e.at(level.get(), step))?;
        reweight(model, o.value, &coarse, &mut lw_coarse, &mut s2).map_err(|e| e.at(level.get(), step))?;
        let (fine_est, _) = weighted_mean(&s1.w, &fine, model);
        let (coarse_est, _) = weighted_mean(&s2.w, &coarse, model);
        out.fine_filter.push(fine_est);
        out.coarse_filter.push(coarse_est);
        out.increments.push(fine_est - coarse_est);

        let ess_fine = ess(&s1.w);
        let ess_coarse = ess(&s2.w);
        out.fine_ess.push(ess_fine);
        out.coarse_ess.push(ess_coarse);

        let resample = should_resample(ess_coarse, ess_fraction, n);
        if resample {
            let idx = coupled_resample(&s1.w, &s2.w, &mut resampling)?;
            out.alpha.push(crate::resampling::coupling_probability(&s1.w, &s2.w)?);
            let new_fine: Vec<f64> = idx.first.iter().map(|&i| fine[i]).collect();
            let new_coarse: Vec<f64> = idx.second.iter().map(|&i| coarse[i]).collect();
            let new_common: Vec<bool> =
                idx.first.iter().zip(&idx.coupled).map(|(&i, &c)| c && in_common[i]).collect();
            fine = new_fine;
            coarse = new_coarse;
            in_common = new_common;
            lw_fine.iter_mut().for_each(|v| *v = 0.0);
            lw_coarse.iter_mut().for_each(|v| *v = 0.0);
        } else {
            out.alpha.push(f64::NAN);
        }
        out.resampled.push(resample);
        out.coupled_fraction.push(in_common.iter().filter(|&&c| c).count() as f64 / n as f64);
    }
    Ok(out)
}

/// Result of [`mlpf_run`].
#[derive(Debug, Clone)]
pub struct MlpfOutput {
    /// `η̂^{ML}_m(φ)` per step.
    pub estimates: Vec<f64>,
    /// One entry per level, level 0 first.
    pub levels: Vec<CoupledFilterOutput>,
    pub cost: u64,
}

/// Runs the multilevel particle filter. Level `l` uses stream `key.child(l)`.
/// Levels are independent and run in parallel; the per-step sum is taken in
/// ascending level order.
pub fn mlpf_run(
    model: &ModelSpec,
    obs: &[Observation],
    alloc: &LevelAllocation,
    ess_fraction: f64,
    key: StreamKey,
) -> Result<MlpfOutput> {
    use rayon::prelude::*;
    let levels: Vec<CoupledFilterOutput> = (0..=alloc.max_level)
        .into_par_iter()
        .map(|l| {
            let n = alloc.particles[l as usize];
            let level_key = key.child(l as u64);
            if l == 0 {
                pf_run(model, obs, LevelIndex(0), n, ess_fraction, level_key)
                    .map(|out| CoupledFilterOutput::from_level_zero(&out))
            } else {
                coupled_pf_run(model, obs, LevelIndex(l), n, ess_fraction, level_key)
            }
        })
        .collect::<Result<_>>()?;
    let estimates = (0..obs.len())
        .map(|m| levels.iter().fold(0.0, |acc, lv| acc + lv.increments[m]))
        .collect();
    let cost = levels.iter().map(|lv| lv.cost).sum();
    Ok(MlpfOutput { estimates, levels, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin, observations, Diffusion, Drift, ModelName, ObsDensity, TestFunction};
    use approx::assert_abs_diff_eq;

    fn ou() -> ModelSpec {
        builtin(ModelName::Ou, &[]).unwrap()
    }

    fn obs(n: usize) -> Vec<Observation> {
        observations(&(0..n).map(|k| 0.4 * (k as f64).cos()).collect::<Vec<_>>())
    }

    #[test]
    fn allocation_examples() {
        let a = level_allocation(4, &ou(), AllocationMode::Defaults).unwrap();
        assert_eq!(a.base_particles, 1024.0);
        assert_eq!(a.particles, vec![1024, 512, 256, 128, 64]);
        assert_eq!(a.beta, 2.0);

        let nlm = builtin(ModelName::Nlm, &[]).unwrap();
        let a = level_allocation(2, &nlm, AllocationMode::Defaults).unwrap();
        assert_eq!(a.particles, vec![22, 13, 8]);
        assert_eq!(a.variant, AllocationVariant::General);

        let a = level_allocation(1, &ou(), AllocationMode::Defaults).unwrap();
        assert_eq!(a.particles, vec![4, 2]);

        let a = level_allocation(3, &ou(), AllocationMode::ExplicitN0(100.0)).unwrap();
        assert_eq!(a.particles, vec![100, 50, 25, 12]);
        assert!(matches!(level_allocation(0, &ou(), AllocationMode::Defaults), Err(Error::Config(_))));
    }

    #[test]
    fn allocation_is_non_increasing_and_floored() {
        for l in 1..12 {
            for name in ModelName::ALL {
                let m = builtin(name, &[]).unwrap();
                let a = level_allocation(l, &m, AllocationMode::Defaults).unwrap();
                assert_eq!(a.particles.len(), l as usize + 1);
                assert!(a.particles.windows(2).all(|p| p[1] <= p[0]));
                assert!(a.particles.iter().all(|&n| n >= 2));
            }
        }
    }

    #[test]
    fn increment_examples() {
        let m = ou();
        assert_eq!(increment_estimate(&[0.3, 0.7], &[0.3, 0.7], &[1.0, 2.0], &[1.0, 2.0], &m).unwrap(), 0.0);
        assert_abs_diff_eq!(
            increment_estimate(&[0.5, 0.5], &[0.0, 0.0], &[1.0, 3.0], &[7.0, 9.0], &m).unwrap(),
            2.0
        );
        assert_abs_diff_eq!(
            increment_estimate(&[0.5, 0.5], &[0.25, 0.75], &[0.0, 1.0], &[0.0, 1.0], &m).unwrap(),
            -0.25
        );
        assert!(matches!(increment_estimate(&[1.0], &[0.5, 0.5], &[0.0], &[0.0, 1.0], &m), Err(Error::Contract(_))));
    }

    #[test]
    fn unit_test_function_zeroes_increments() {
        let m = builtin(ModelName::Gbm, &[]).unwrap().with_test_function(TestFunction::One);
        for l in 1..5 {
            let out = coupled_pf_run(&m, &obs(6), LevelIndex(l), 32, 0.5, StreamKey::new(l as u64)).unwrap();
            assert!(out.increments.iter().all(|&a| a == 0.0));
        }
        let alloc = level_allocation(3, &m, AllocationMode::Defaults).unwrap();
        let out = mlpf_run(&m, &obs(6), &alloc, 0.25, StreamKey::new(9)).unwrap();
        assert!(out.estimates.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn exact_path_coincidence() {
        let m = ou()
            .with_drift(Drift::Zero)
            .with_diffusion(Diffusion::Constant(0.7))
            .with_obs_density(ObsDensity::Constant { log_value: 0.0 });
        let out = coupled_pf_run(&m, &obs(10), LevelIndex(3), 50, 1.0, StreamKey::new(1)).unwrap();
        assert!(out.increments.iter().all(|a| a.abs() < 1e-12));
        assert!(out.coupled_fraction.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn level_zero_coupled_run_is_rejected() {
        let err = coupled_pf_run(&ou(), &obs(2), LevelIndex(0), 10, 0.5, StreamKey::new(0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn single_level_mlpf_equals_plain_filter() {
        let m = ou();
        let alloc = LevelAllocation::explicit(vec![200], AllocationVariant::ConstantDiffusion).unwrap();
        let key = StreamKey::new(42);
        let ml = mlpf_run(&m, &obs(12), &alloc, 0.25, key).unwrap();
        let pf = pf_run(&m, &obs(12), LevelIndex(0), 200, 0.25, key.child(0)).unwrap();
        assert_eq!(ml.estimates, pf.filter);
        assert_eq!(ml.cost, pf.cost);
    }

    #[test]
    fn telescoping_sum_is_exact() {
        let m = builtin(ModelName::Nlm, &[]).unwrap();
        let alloc = level_allocation(3, &m, AllocationMode::Defaults).unwrap();
        let out = mlpf_run(&m, &obs(8), &alloc, 0.25, StreamKey::new(3)).unwrap();
        for (step, est) in out.estimates.iter().enumerate() {
            let mut sum = 0.0;
            for lv in &out.levels {
                sum += lv.increments[step];
            }
            assert_eq!(est.to_bits(), sum.to_bits());
        }
    }

    #[test]
    fn coupled_cost_and_adding_levels_keeps_lower_levels() {
        let m = ou();
        let o = obs(5);
        let out = coupled_pf_run(&m, &o, LevelIndex(3), 20, 0.25, StreamKey::new(0)).unwrap();
        assert_eq!(out.cost, 20 * (8 + 4) * 5);

        let small = LevelAllocation::explicit(vec![64, 32], AllocationVariant::ConstantDiffusion).unwrap();
        let big = LevelAllocation::explicit(vec![64, 32, 16], AllocationVariant::ConstantDiffusion).unwrap();
        let a = mlpf_run(&m, &o, &small, 0.25, StreamKey::new(8)).unwrap();
        let b = mlpf_run(&m, &o, &big, 0.25, StreamKey::new(8)).unwrap();
        assert_eq!(a.levels[1].increments, b.levels[1].increments);
    }

    #[test]
    fn degenerate_coarse_weights_name_level_and_step() {
        let m = ou().with_obs_density(ObsDensity::Custom(std::sync::Arc::new(|y, _| {
            if y > 1.0 {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        })));
        let o = observations(&[0.0, 2.0]);
        let err = coupled_pf_run(&m, &o, LevelIndex(2), 10, 0.25, StreamKey::new(0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateWeights { level: 2, step: 2 }), "{err}");
    }
}
