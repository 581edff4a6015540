//! Diffusion and observation models.
//!
//! A [`ModelSpec`] bundles the pieces a filter needs: the drift and diffusion
//! coefficients of a scalar SDE `dX = a(X) dt + b(X) dW`, the observation
//! log-density `log G(y, x)`, the test function `φ` whose filtered mean is
//! estimated, the observation interval `δ` and the initial state `x₀`.
//!
//! Four models are built in and can be created by name with
//! [`builtin_model`]. Their constants can be overridden by the symbol names
//! `theta`, `mu`, `sigma`, `tau2`, `s`, `nu`, `x0` and `delta`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// States at or below this value are clamped before `ln x` is taken.
pub const GBM_CLAMP_FLOOR: f64 = 1e-10;

/// Largest exponent passed to `exp` by the Langevin test function.
pub const EXP_CAP: f64 = 700.0;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type LogDensityFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    /// Ornstein–Uhlenbeck with Gaussian observations.
    Ou,
    /// Geometric Brownian motion observed through `N(ln x, τ²)`.
    Gbm,
    /// Langevin diffusion targeting a Student-t law, stochastic-volatility observations.
    Langevin,
    /// Mean-reverting drift with state-dependent diffusion `σ/√(1+x²)`, Laplace observations.
    Nlm,
}

impl ModelName {
    pub const ALL: [ModelName; 4] = [ModelName::Ou, ModelName::Gbm, ModelName::Langevin, ModelName::Nlm];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::Ou => "ou",
            ModelName::Gbm => "gbm",
            ModelName::Langevin => "langevin",
            ModelName::Nlm => "nlm",
        }
    }

    /// Default constants, in the order they are reported.
    pub fn defaults(self) -> &'static [(&'static str, f64)] {
        match self {
            ModelName::Ou => &[
                ("x0", 0.0),
                ("delta", 0.5),
                ("theta", 1.0),
                ("mu", 0.0),
                ("sigma", 0.5),
                ("tau2", 0.2),
            ],
            ModelName::Gbm => &[("x0", 1.0), ("delta", 0.001), ("mu", 0.02), ("sigma", 0.2), ("tau2", 0.01)],
            ModelName::Langevin => &[("x0", 0.0), ("delta", 1.0), ("nu", 10.0), ("sigma", 1.0), ("tau2", 1.0)],
            ModelName::Nlm => &[
                ("x0", 0.0),
                ("delta", 0.5),
                ("theta", 1.0),
                ("mu", 0.0),
                ("sigma", 1.0),
                ("s", 0.316_227_766_016_837_94),
            ],
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ou" => Ok(ModelName::Ou),
            "gbm" => Ok(ModelName::Gbm),
            "langevin" => Ok(ModelName::Langevin),
            "nlm" => Ok(ModelName::Nlm),
            _ => Err(Error::Config(format!("unknown model `{s}` (expected ou, gbm, langevin or nlm)"))),
        }
    }
}

/// Drift coefficient `a(x)`.
#[derive(Clone)]
pub enum Drift {
    /// `θ(μ − x)`
    MeanReverting { theta: f64, mu: f64 },
    /// `μ x`
    Exponential { mu: f64 },
    /// `½ ∇ log π(x)` for the Student-t density with `nu` degrees of freedom,
    /// `π(x) ∝ (1 + x²/ν)^{−(ν+1)/2}`, giving `−½ (ν+1) x / (ν + x²)`.
    StudentTLangevin { nu: f64 },
    Zero,
    Custom(ScalarFn),
}

impl Drift {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Drift::MeanReverting { theta, mu } => theta * (mu - x),
            Drift::Exponential { mu } => mu * x,
            Drift::StudentTLangevin { nu } => -0.5 * (nu + 1.0) * x / (nu + x * x),
            Drift::Zero => 0.0,
            Drift::Custom(ref f) => f(x),
        }
    }
}

/// Diffusion coefficient `b(x)`.
#[derive(Clone)]
pub enum Diffusion {
    /// `σ`
    Constant(f64),
    /// `σ x`
    Proportional(f64),
    /// `σ / √(1 + x²)`
    Damped(f64),
    Custom(ScalarFn),
}

impl Diffusion {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Diffusion::Constant(sigma) => sigma,
            Diffusion::Proportional(sigma) => sigma * x,
            Diffusion::Damped(sigma) => sigma / (1.0 + x * x).sqrt(),
            Diffusion::Custom(ref f) => f(x),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Diffusion::Constant(_))
    }
}

/// Observation log-density `log G(y, x)`.
#[derive(Clone)]
pub enum ObsDensity {
    /// `y ~ N(x, var)`
    Gaussian { var: f64 },
    /// `y ~ N(ln x, var)`; states below [`GBM_CLAMP_FLOOR`] are clamped.
    LogGaussian { var: f64 },
    /// `y ~ N(0, tau2 · eˣ)`
    Volatility { tau2: f64 },
    /// `y ~ Laplace(x, scale)`
    Laplace { scale: f64 },
    /// `log G ≡ log_value`: observations carry no information.
    Constant { log_value: f64 },
    Custom(LogDensityFn),
}

impl ObsDensity {
    /// Returns `(log G(y, x), clamped)`.
    #[inline]
    pub fn log_density(&self, y: f64, x: f64) -> (f64, bool) {
        match *self {
            ObsDensity::Gaussian { var } => (gaussian_log_pdf(y, x, var), false),
            ObsDensity::LogGaussian { var } => {
                let clamped = x <= GBM_CLAMP_FLOOR;
                let x = if clamped { GBM_CLAMP_FLOOR } else { x };
                (gaussian_log_pdf(y, x.ln(), var), clamped)
            }
            ObsDensity::Volatility { tau2 } => {
                // N(0, τ² eˣ), written in log-variance form to avoid overflow.
                let log_var = tau2.ln() + x;
                (-0.5 * ((2.0 * PI).ln() + log_var) - 0.5 * y * y * (-log_var).exp(), false)
            }
            ObsDensity::Laplace { scale } => (-(2.0 * scale).ln() - (y - x).abs() / scale, false),
            ObsDensity::Constant { log_value } => (log_value, false),
            ObsDensity::Custom(ref f) => (f(y, x), false),
        }
    }

    /// Draws an observation given the latent state.
    pub fn sample<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> Result<f64> {
        let z: f64 = rng.sample(StandardNormal);
        match *self {
            ObsDensity::Gaussian { var } => Ok(x + var.sqrt() * z),
            ObsDensity::LogGaussian { var } => Ok(x.max(GBM_CLAMP_FLOOR).ln() + var.sqrt() * z),
            ObsDensity::Volatility { tau2 } => Ok((0.5 * (tau2.ln() + x)).exp() * z),
            ObsDensity::Laplace { scale } => {
                let u: f64 = rng.random::<f64>() - 0.5;
                Ok(x - scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln())
            }
            ObsDensity::Constant { .. } | ObsDensity::Custom(_) => {
                Err(Error::Config("cannot simulate observations from this observation density".into()))
            }
        }
    }
}

#[inline]
fn gaussian_log_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (2.0 * PI * var).ln() - 0.5 * r * r / var
}

/// Test function `φ`.
#[derive(Clone)]
pub enum TestFunction {
    Identity,
    One,
    /// `tau2 · eˣ`, with the exponent capped at [`EXP_CAP`].
    ScaledExp { tau2: f64 },
    Custom(ScalarFn),
}

impl TestFunction {
    /// Returns `(φ(x), capped)`.
    #[inline]
    pub fn eval(&self, x: f64) -> (f64, bool) {
        match *self {
            TestFunction::Identity => (x, false),
            TestFunction::One => (1.0, false),
            TestFunction::ScaledExp { tau2 } => {
                if x > EXP_CAP {
                    (tau2 * EXP_CAP.exp(), true)
                } else {
                    (tau2 * x.exp(), false)
                }
            }
            TestFunction::Custom(ref f) => (f(x), false),
        }
    }
}

/// A scalar diffusion observed at times `δ, 2δ, …`.
///
/// Immutable once built; clone it freely across threads.
#[derive(Clone)]
pub struct ModelSpec {
    name: Option<ModelName>,
    constants: BTreeMap<String, f64>,
    drift: Drift,
    diffusion: Diffusion,
    obs: ObsDensity,
    test_function: TestFunction,
    delta: f64,
    x0: f64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("constants", &self.constants)
            .field("delta", &self.delta)
            .field("x0", &self.x0)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    /// Assembles a model from its parts.
    pub fn new(
        drift: Drift,
        diffusion: Diffusion,
        obs: ObsDensity,
        test_function: TestFunction,
        delta: f64,
        x0: f64,
    ) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("observation interval must be positive and finite, got {delta}")));
        }
        if !x0.is_finite() {
            return Err(Error::Config(format!("initial state must be finite, got {x0}")));
        }
        let mut constants = BTreeMap::new();
        constants.insert("delta".to_string(), delta);
        constants.insert("x0".to_string(), x0);
        Ok(ModelSpec { name: None, constants, drift, diffusion, obs, test_function, delta, x0 })
    }

    pub fn name(&self) -> Option<ModelName> {
        self.name
    }

    /// Always 1: states and observations are scalars.
    pub fn dimension(&self) -> usize {
        1
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn initial_state(&self) -> f64 {
        self.x0
    }

    pub fn constants(&self) -> &BTreeMap<String, f64> {
        &self.constants
    }

    pub fn constant(&self, key: &str) -> Option<f64> {
        self.constants.get(key).copied()
    }

    pub fn drift_fn(&self) -> &Drift {
        &self.drift
    }

    pub fn diffusion_fn(&self) -> &Diffusion {
        &self.diffusion
    }

    pub fn obs_density(&self) -> &ObsDensity {
        &self.obs
    }

    pub fn test_function(&self) -> &TestFunction {
        &self.test_function
    }

    pub fn has_constant_diffusion(&self) -> bool {
        self.diffusion.is_constant()
    }

    pub fn drift(&self, x: f64) -> Result<f64> {
        finite_input(x)?;
        Ok(self.drift.eval(x))
    }

    pub fn diffusion(&self, x: f64) -> Result<f64> {
        finite_input(x)?;
        Ok(self.diffusion.eval(x))
    }

    /// Natural-log observation density. GBM states at or below the clamp
    /// floor are evaluated at the floor.
    pub fn obs_logdensity(&self, y: f64, x: f64) -> Result<f64> {
        finite_input(x)?;
        let (value, _) = self.obs.log_density(y, x);
        if value.is_nan() {
            return Err(Error::Domain(format!("observation density is NaN at y={y}, x={x}")));
        }
        Ok(value)
    }

    pub fn phi(&self, x: f64) -> f64 {
        self.test_function.eval(x).0
    }

    pub fn with_drift(mut self, drift: Drift) -> Self {
        self.drift = drift;
        self
    }

    pub fn with_diffusion(mut self, diffusion: Diffusion) -> Self {
        self.diffusion = diffusion;
        self
    }

    pub fn with_obs_density(mut self, obs: ObsDensity) -> Self {
        self.obs = obs;
        self
    }

    pub fn with_test_function(mut self, test_function: TestFunction) -> Self {
        self.test_function = test_function;
        self
    }
}

fn finite_input(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("state must be finite, got {x}")))
    }
}

/// One observation `y_k` taken at time `k δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// One-based time index `k`.
    pub index: usize,
    pub value: f64,
}

/// Numbers a sequence of observation values `1, 2, …`.
pub fn observations(values: &[f64]) -> Vec<Observation> {
    values.iter().enumerate().map(|(i, &value)| Observation { index: i + 1, value }).collect()
}

/// Checks that indices run `1, 2, …, n` and values are finite.
pub fn validate_observations(obs: &[Observation]) -> Result<()> {
    for (i, o) in obs.iter().enumerate() {
        if o.index != i + 1 {
            return Err(Error::Contract(format!("observation {} has index {}, expected {}", i + 1, o.index, i + 1)));
        }
        if !o.value.is_finite() {
            return Err(Error::Domain(format!("observation {} is not finite", o.index)));
        }
    }
    Ok(())
}

/// Builds one of the four built-in models, applying `overrides` on top of
/// its default constants. Override keys must name constants of that model.
pub fn builtin_model(name: ModelName, overrides: &BTreeMap<String, f64>) -> Result<ModelSpec> {
    let mut constants: BTreeMap<String, f64> =
        name.defaults().iter().map(|&(k, v)| (k.to_string(), v)).collect();
    for (key, &value) in overrides {
        match constants.get_mut(key.as_str()) {
            Some(slot) => *slot = value,
            None => {
                let known: Vec<&str> = name.defaults().iter().map(|(k, _)| *k).collect();
                return Err(Error::Config(format!(
                    "model {name} has no constant `{key}` (known: {})",
                    known.join(", ")
                )));
            }
        }
    }
    if let Some((key, value)) = constants.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Config(format!("constant `{key}` must be finite, got {value}")));
    }
    let c = |key: &str| constants[key];
    for key in ["tau2", "s", "nu", "delta"] {
        if let Some(&v) = constants.get(key) {
            if v <= 0.0 {
                return Err(Error::Config(format!("constant `{key}` must be positive, got {v}")));
            }
        }
    }
    if c("sigma") < 0.0 {
        return Err(Error::Config(format!("constant `sigma` must be non-negative, got {}", c("sigma"))));
    }
    let (drift, diffusion, obs, test_function) = match name {
        ModelName::Ou => (
            Drift::MeanReverting { theta: c("theta"), mu: c("mu") },
            Diffusion::Constant(c("sigma")),
            ObsDensity::Gaussian { var: c("tau2") },
            TestFunction::Identity,
        ),
        ModelName::Gbm => (
            Drift::Exponential { mu: c("mu") },
            Diffusion::Proportional(c("sigma")),
            ObsDensity::LogGaussian { var: c("tau2") },
            TestFunction::Identity,
        ),
        ModelName::Langevin => (
            Drift::StudentTLangevin { nu: c("nu") },
            Diffusion::Constant(c("sigma")),
            ObsDensity::Volatility { tau2: c("tau2") },
            TestFunction::ScaledExp { tau2: c("tau2") },
        ),
        ModelName::Nlm => (
            Drift::MeanReverting { theta: c("theta"), mu: c("mu") },
            Diffusion::Damped(c("sigma")),
            ObsDensity::Laplace { scale: c("s") },
            TestFunction::Identity,
        ),
    };
    let mut model = ModelSpec::new(drift, diffusion, obs, test_function, c("delta"), c("x0"))?;
    model.name = Some(name);
    model.constants = constants;
    Ok(model)
}

/// Convenience wrapper over [`builtin_model`] taking `(key, value)` pairs.
pub fn builtin(name: ModelName, overrides: &[(&str, f64)]) -> Result<ModelSpec> {
    let map = overrides.iter().map(|&(k, v)| (k.to_string(), v)).collect();
    builtin_model(name, &map)
}
