//! Euler–Maruyama transition kernels over one observation interval.
//!
//! At level `l` an interval of length `δ` is split into `k_l = 2^l` steps of
//! size `h_l = δ 2^{−l}`. The coupled kernel advances a fine chain at level
//! `l` and a coarse chain at level `l − 1` with shared Brownian increments:
//! the `m`-th coarse increment is the sum of fine increments `2m` and
//! `2m + 1`, i.e. `√h_l (ξ_{2m} + ξ_{2m+1})`, whose variance is `h_{l−1}`.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::NoiseSource;

/// Discretization level `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LevelIndex(pub u32);

impl LevelIndex {
    pub fn get(self) -> u32 {
        self.0
    }

    /// Euler steps per observation interval, `2^l`.
    pub fn steps(self) -> u64 {
        1u64 << self.0
    }

    /// Step size `δ 2^{−l}`.
    pub fn step_size(self, delta: f64) -> f64 {
        delta * 0.5f64.powi(self.0 as i32)
    }

    pub fn coarser(self) -> Option<LevelIndex> {
        self.0.checked_sub(1).map(LevelIndex)
    }

    /// Euler steps performed by one coupled transition, `2^l + 2^{l−1}`
    /// (just `1` at level 0, which has no coarse partner).
    pub fn coupled_steps(self) -> u64 {
        match self.coarser() {
            Some(c) => self.steps() + c.steps(),
            None => 1,
        }
    }
}

impl fmt::Display for LevelIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One explicit Euler–Maruyama step: `x + h a(x) + √h b(x) ξ`.
#[inline]
pub fn euler_step(model: &ModelSpec, x: f64, h: f64, xi: f64) -> f64 {
    x + h * model.drift_fn().eval(x) + h.sqrt() * model.diffusion_fn().eval(x) * xi
}

#[inline]
fn step_sqrt(model: &ModelSpec, x: f64, h: f64, sqrt_h: f64, xi: f64) -> f64 {
    x + h * model.drift_fn().eval(x) + sqrt_h * model.diffusion_fn().eval(x) * xi
}

/// Advances `x` across one observation interval at `level`, consuming exactly
/// `2^l` Gaussian draws. Fails with the (zero-based) index of the first step
/// that produced a non-finite state.
pub fn simulate_transition<N: NoiseSource + ?Sized>(
    model: &ModelSpec,
    x: f64,
    level: LevelIndex,
    noise: &mut N,
) -> Result<f64> {
    let h = level.step_size(model.delta());
    let sqrt_h = h.sqrt();
    let mut x = x;
    for step in 0..level.steps() as usize {
        x = step_sqrt(model, x, h, sqrt_h, noise.standard_normal());
        if !x.is_finite() {
            return Err(Error::NonFinite { step });
        }
    }
    Ok(x)
}

/// Advances a fine/coarse pair across one observation interval.
///
/// The fine chain takes `2^l` steps of size `h_l`; the coarse chain takes
/// `2^{l−1}` steps of size `2h_l`, reusing the fine draws pairwise. Exactly
/// `2^l` Gaussian draws are consumed. Level 0 has no coarse partner and is
/// rejected.
pub fn simulate_coupled_transition<N: NoiseSource + ?Sized>(
    model: &ModelSpec,
    x_fine: f64,
    x_coarse: f64,
    level: LevelIndex,
    noise: &mut N,
) -> Result<(f64, f64)> {
    let coarse = level
        .coarser()
        .ok_or_else(|| Error::Contract("coupled transition needs level >= 1".into()))?;
    let h = level.step_size(model.delta());
    let sqrt_h = h.sqrt();
    let (mut xf, mut xc) = (x_fine, x_coarse);
    for m in 0..coarse.steps() as usize {
        let xi0 = noise.standard_normal();
        let xi1 = noise.standard_normal();
        xf = step_sqrt(model, xf, h, sqrt_h, xi0);
        if !xf.is_finite() {
            return Err(Error::NonFinite { step: 2 * m });
        }
        xf = step_sqrt(model, xf, h, sqrt_h, xi1);
        if !xf.is_finite() {
            return Err(Error::NonFinite { step: 2 * m + 1 });
        }
        // One coarse step of 2h_l driven by √h_l (ξ0 + ξ1), applied in two
        // halves with the coefficients frozen at the coarse state.
        let (a, b) = (model.drift_fn().eval(xc), model.diffusion_fn().eval(xc));
        xc = xc + h * a + sqrt_h * b * xi0;
        xc = xc + h * a + sqrt_h * b * xi1;
        if !xc.is_finite() {
            return Err(Error::NonFinite { step: m });
        }
    }
    Ok((xf, xc))
}
