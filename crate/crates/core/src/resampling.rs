//! Weight normalization, effective sample size and resampling.
//!
//! [`coupled_resample`] draws index pairs for a fine and a coarse particle
//! system so that each marginal is exactly multinomial under its own weights
//! while the two indices agree as often as possible: with probability
//! `α = Σ min(w₁ᵢ, w₂ᵢ)` a common index is drawn from the normalized minimum
//! measure; otherwise the two indices are drawn independently from the
//! normalized residuals `wⱼ − min(w₁, w₂)`, whose supports are disjoint.

use std::ops::Deref;

use rand::Rng;

use crate::error::{Error, Result};

/// Coupling probabilities within this distance of 0 or 1 are snapped to it.
pub const ALPHA_EPS: f64 = 1e-12;

/// Normalized, non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Wraps weights that are already normalized. Returns a contract error if
    /// any entry is negative or non-finite, or if they do not sum to one
    /// within `1e-9`.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Contract("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("weights sum to {total}, not 1")));
        }
        Ok(WeightVector(weights))
    }

    pub fn uniform(n: usize) -> Self {
        WeightVector(vec![1.0 / n as f64; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for WeightVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Normalizes log-weights: subtract the maximum, exponentiate, divide by the sum.
///
/// Fails with [`Error::DegenerateWeights`] when no entry is finite or the
/// normalizer is not positive. `NaN` entries count as degenerate.
pub fn normalize_weights(log_unnormalized: &[f64]) -> Result<WeightVector> {
    let mut out = Vec::with_capacity(log_unnormalized.len());
    normalize_into(log_unnormalized, &mut out)?;
    Ok(WeightVector(out))
}

/// In-place variant of [`normalize_weights`] that reuses `out`. Returns the
/// maximum log-weight that was subtracted and `ln Σ exp(lw − max)`.
pub(crate) fn normalize_into(log_w: &[f64], out: &mut Vec<f64>) -> Result<(f64, f64)> {
    let degenerate = || Error::DegenerateWeights { level: 0, step: 0 };
    if log_w.is_empty() || log_w.iter().any(|v| v.is_nan()) {
        return Err(degenerate());
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(degenerate());
    }
    out.clear();
    out.extend(log_w.iter().map(|&v| (v - max).exp()));
    let total: f64 = out.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(degenerate());
    }
    let inv = 1.0 / total;
    out.iter_mut().for_each(|w| *w *= inv);
    Ok((max, total.ln()))
}

/// Effective sample size `1 / Σ wᵢ²`.
pub fn ess(w: &[f64]) -> f64 {
    1.0 / w.iter().map(|x| x * x).sum::<f64>()
}

/// Elementwise-minimum mass `Σ min(w₁ᵢ, w₂ᵢ)`.
pub fn coupling_probability(w1: &[f64], w2: &[f64]) -> Result<f64> {
    if w1.len() != w2.len() {
        return Err(Error::Contract(format!("weight lengths differ: {} vs {}", w1.len(), w2.len())));
    }
    Ok(w1.iter().zip(w2).map(|(a, b)| a.min(*b)).sum::<f64>().clamp(0.0, 1.0))
}

/// Inverse-CDF sampler over an unnormalized weight table.
struct Categorical {
    cumulative: Vec<f64>,
}

impl Categorical {
    fn new(weights: impl Iterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Categorical { cumulative }
    }

    fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    #[inline]
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * self.total();
        let i = self.cumulative.partition_point(|&c| c <= u);
        // Rounding can push `u` onto the last cumulative value; fall back to
        // the last index with positive mass.
        if i < self.cumulative.len() {
            i
        } else {
            self.last_positive()
        }
    }

    fn last_positive(&self) -> usize {
        let n = self.cumulative.len();
        (1..n).rev().find(|&i| self.cumulative[i] > self.cumulative[i - 1]).unwrap_or(0)
    }
}

/// `N` i.i.d. categorical draws with `P(i) = wᵢ`.
pub fn multinomial_resample<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Vec<usize> {
    let table = Categorical::new(w.iter().copied());
    (0..w.len()).map(|_| table.sample(rng)).collect()
}

/// Index pairs drawn by [`coupled_resample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoupledIndices {
    /// Ancestor indices for the fine system.
    pub first: Vec<usize>,
    /// Ancestor indices for the coarse system.
    pub second: Vec<usize>,
    /// `true` when the pair came from the common (minimum) measure.
    pub coupled: Vec<bool>,
}

impl CoupledIndices {
    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// Maximal-coupling resampling of two weight vectors of equal length.
///
/// Each of the `N` pairs independently takes the common branch with
/// probability `α`. `α ≥ 1 − 1e−12` always takes the common branch and
/// `α ≤ 1e−12` never does. The residuals are renormalized by their own
/// computed sums.
pub fn coupled_resample<R: Rng + ?Sized>(w1: &[f64], w2: &[f64], rng: &mut R) -> Result<CoupledIndices> {
    let alpha = coupling_probability(w1, w2)?;
    let n = w1.len();
    let always_common = alpha >= 1.0 - ALPHA_EPS;
    let never_common = alpha <= ALPHA_EPS;

    let common = Categorical::new(w1.iter().zip(w2).map(|(a, b)| a.min(*b)));
    let (resid1, resid2) = if always_common {
        (None, None)
    } else {
        (
            Some(Categorical::new(w1.iter().zip(w2).map(|(a, b)| a - a.min(*b)))),
            Some(Categorical::new(w2.iter().zip(w1).map(|(b, a)| b - a.min(*b)))),
        )
    };

    let mut out = CoupledIndices {
        first: Vec::with_capacity(n),
        second: Vec::with_capacity(n),
        coupled: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let take_common = always_common || (!never_common && rng.random::<f64>() < alpha);
        if take_common {
            let i = common.sample(rng);
            out.first.push(i);
            out.second.push(i);
            out.coupled.push(true);
        } else {
            let (r1, r2) = (resid1.as_ref().unwrap(), resid2.as_ref().unwrap());
            out.first.push(r1.sample(rng));
            out.second.push(r2.sample(rng));
            out.coupled.push(false);
        }
    }
    Ok(out)
}

/// Residual masses `(Σ (w₁ − w₁∧w₂), Σ (w₂ − w₁∧w₂))` before renormalization.
pub fn residual_masses(w1: &[f64], w2: &[f64]) -> Result<(f64, f64)> {
    coupling_probability(w1, w2)?;
    let r1 = w1.iter().zip(w2).map(|(a, b)| a - a.min(*b)).sum();
    let r2 = w2.iter().zip(w1).map(|(b, a)| b - a.min(*b)).sum();
    Ok((r1, r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(&*normalize_weights(&[0.0, 0.0]).unwrap(), &[0.5, 0.5]);
        let w = normalize_weights(&[0.0, 3f64.ln()]).unwrap();
        assert_abs_diff_eq!(w[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.75, epsilon = 1e-15);
        let w = normalize_weights(&[-1000.0, 0.0]).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(w[1], 1.0, epsilon = 1e-15);
        assert!(w[0] >= 0.0 && w[0] < 1e-300);
    }

    #[test]
    fn normalize_rejects_degenerate() {
        for bad in [vec![f64::NEG_INFINITY; 3], vec![], vec![0.0, f64::NAN]] {
            assert!(matches!(normalize_weights(&bad), Err(Error::DegenerateWeights { .. })));
        }
        // A single finite entry is enough.
        assert_eq!(&*normalize_weights(&[f64::NEG_INFINITY, 2.0]).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn ess_examples() {
        assert_abs_diff_eq!(ess(&WeightVector::uniform(4)), 4.0, epsilon = 1e-12);
        assert_eq!(ess(&[0.0, 1.0, 0.0]), 1.0);
        assert_eq!(ess(&[0.5, 0.5, 0.0, 0.0]), 2.0);
    }

    #[test]
    fn multinomial_point_mass_and_determinism() {
        let w = [0.0, 0.0, 1.0, 0.0];
        let idx = multinomial_resample(&w, &mut StreamKey::new(1).stream());
        assert!(idx.iter().all(|&i| i == 2));
        let uniform = WeightVector::uniform(50);
        let a = multinomial_resample(&uniform, &mut StreamKey::new(2).stream());
        let b = multinomial_resample(&uniform, &mut StreamKey::new(2).stream());
        assert_eq!(a, b);
    }

    #[test]
    fn multinomial_uniform_frequencies() {
        let n = 100_000;
        let w = WeightVector::uniform(n);
        let idx = multinomial_resample(&w, &mut StreamKey::new(3).stream());
        // Bin indices into 10 blocks of equal mass; each block count ~ Bin(n, 0.1).
        let mut blocks = [0usize; 10];
        for i in idx {
            blocks[i * 10 / n] += 1;
        }
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        for c in blocks {
            assert!((c as f64 - n as f64 * 0.1).abs() < 4.0 * sd, "{blocks:?}");
        }
    }

    #[test]
    fn coupling_probability_examples() {
        assert_abs_diff_eq!(coupling_probability(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 1.0);
        assert_eq!(coupling_probability(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(coupling_probability(&[0.5, 0.5], &[0.25, 0.75]).unwrap(), 0.75);
        assert!(matches!(coupling_probability(&[1.0], &[0.5, 0.5]), Err(Error::Contract(_))));
    }

    #[test]
    fn coupled_identical_weights_always_common() {
        let w = [0.1, 0.2, 0.3, 0.4];
        let idx = coupled_resample(&w, &w, &mut StreamKey::new(4).stream()).unwrap();
        assert!(idx.coupled.iter().all(|&c| c));
        assert_eq!(idx.first, idx.second);
    }

    #[test]
    fn coupled_disjoint_supports() {
        let idx = coupled_resample(&[1.0, 0.0], &[0.0, 1.0], &mut StreamKey::new(5).stream()).unwrap();
        assert!(idx.first.iter().all(|&i| i == 0));
        assert!(idx.second.iter().all(|&i| i == 1));
        assert!(idx.coupled.iter().all(|&c| !c));
    }

    #[test]
    fn coupled_marginals_and_coupling_rate() {
        let (w1, w2) = ([0.5, 0.5], [0.25, 0.75]);
        let mut rng = StreamKey::new(6).stream();
        let total = 100_000usize;
        let (mut first0, mut second0, mut common) = (0usize, 0usize, 0usize);
        let mut drawn = 0;
        while drawn < total {
            let idx = coupled_resample(&w1, &w2, &mut rng).unwrap();
            first0 += idx.first.iter().filter(|&&i| i == 0).count();
            second0 += idx.second.iter().filter(|&&i| i == 0).count();
            common += idx.coupled.iter().filter(|&&c| c).count();
            drawn += idx.len();
        }
        let within = |count: usize, p: f64| {
            let sd = (total as f64 * p * (1.0 - p)).sqrt();
            (count as f64 - total as f64 * p).abs() < 4.0 * sd
        };
        assert!(within(first0, 0.5));
        assert!(within(second0, 0.25));
        assert!(within(common, 0.75));
    }

    #[test]
    fn branch_b_indices_always_differ() {
        let w1 = [0.4, 0.1, 0.3, 0.2];
        let w2 = [0.1, 0.4, 0.2, 0.3];
        let idx = coupled_resample(&w1, &w2, &mut StreamKey::new(7).stream()).unwrap();
        for k in 0..idx.len() {
            assert_eq!(idx.coupled[k], idx.first[k] == idx.second[k]);
        }
    }

    fn weight_vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn residuals_sum_to_one_minus_alpha(
            (w1, w2) in (2usize..40).prop_flat_map(|n| (weight_vector(n), weight_vector(n)))
        ) {
            let alpha = coupling_probability(&w1, &w2).unwrap();
            let (r1, r2) = residual_masses(&w1, &w2).unwrap();
            prop_assert!((r1 - (1.0 - alpha)).abs() < 1e-10);
            prop_assert!((r2 - (1.0 - alpha)).abs() < 1e-10);
            prop_assert!((0.0..=1.0).contains(&alpha));
        }

        #[test]
        fn normalized_weights_sum_to_one(lw in prop::collection::vec(-700.0f64..700.0, 1..64)) {
            let w = normalize_weights(&lw).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn coupled_indices_in_range(
            (w1, w2) in (2usize..20).prop_flat_map(|n| (weight_vector(n), weight_vector(n))),
            seed in 0u64..1000,
        ) {
            let idx = coupled_resample(&w1, &w2, &mut StreamKey::new(seed).stream()).unwrap();
            prop_assert_eq!(idx.len(), w1.len());
            for k in 0..idx.len() {
                prop_assert!(w1[idx.first[k]] > 0.0);
                prop_assert!(w2[idx.second[k]] > 0.0);
                if idx.coupled[k] {
                    prop_assert_eq!(idx.first[k], idx.second[k]);
                }
            }
        }
    }
}
