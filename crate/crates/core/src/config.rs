//! Experiment configuration files.
//!
//! A configuration is a flat TOML document: one `key = value` per line,
//! `#` comments, no tables. Unknown keys are rejected. Every result file the
//! command-line driver writes starts with the fully resolved configuration,
//! embedded as comment lines between [`EMBED_BEGIN`] and [`EMBED_END`]; such
//! a file can itself be passed back as a configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::Method;
use crate::model::{builtin_model, ModelName, ModelSpec};
use crate::oracle::ReferenceSettings;

pub const EMBED_BEGIN: &str = "# mlpf config begin";
pub const EMBED_END: &str = "# mlpf config end";

/// The driver's subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Pf,
    Mlpf,
    Rates,
    Bench,
    Kalman,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Pf => "pf",
            Command::Mlpf => "mlpf",
            Command::Rates => "rates",
            Command::Bench => "bench",
            Command::Kalman => "kalman",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "simulate" => Command::Simulate,
            "pf" => Command::Pf,
            "mlpf" => Command::Mlpf,
            "rates" => Command::Rates,
            "bench" => Command::Bench,
            "kalman" => Command::Kalman,
            _ => return Err(Error::Config(format!("unknown command `{s}`"))),
        })
    }
}

/// All recognised configuration keys. Missing keys take per-command defaults
/// in [`ExperimentConfig::resolve`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<String>,
    pub theta: Option<f64>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub tau2: Option<f64>,
    pub s: Option<f64>,
    pub nu: Option<f64>,
    pub x0: Option<f64>,
    pub delta: Option<f64>,

    /// `bench`: methods to compare.
    pub methods: Option<Vec<String>>,
    /// `pf`: filter level `l`; `mlpf`: maximum level `L`.
    pub level: Option<u32>,
    /// `rates`/`bench`: level range.
    pub min_level: Option<u32>,
    pub max_level: Option<u32>,
    /// `pf`: particle count; `rates`: particles per coupled filter.
    pub particles: Option<usize>,
    pub repetitions: Option<usize>,
    /// `rates`/`bench`: independent synthetic datasets to average over.
    pub datasets: Option<usize>,
    pub ess_fraction: Option<f64>,
    pub seed: Option<u64>,

    /// Number of synthetic observations when no data file is given.
    pub observations: Option<usize>,
    /// CSV with a `y` column (as written by `simulate`).
    pub data: Option<String>,
    /// CSV of `(date, price)` or `(date, log_return)` rows.
    pub returns: Option<String>,
    /// Level of the latent path simulated for synthetic data.
    pub truth_level: Option<u32>,

    pub reference_level: Option<u32>,
    pub reference_particles: Option<usize>,
    pub reference_seeds: Option<usize>,

    pub output: Option<String>,
    /// Fill the `walltime` column of `cost.csv` (otherwise written as `NA`
    /// so reruns are byte-identical).
    pub record_walltime: Option<bool>,
}

/// Default number of synthetic observations.
pub const DEFAULT_OBSERVATIONS: usize = 20;
/// Default number of synthetic observations for `rates`.
pub const DEFAULT_RATE_OBSERVATIONS: usize = 100;

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a configuration file, or the configuration embedded in a result
    /// file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let body = extract_embedded(&text).unwrap_or(text);
        Self::parse(&body).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn model_name(&self) -> Result<ModelName> {
        self.model.as_deref().ok_or_else(|| Error::Config("missing key `model`".into()))?.parse()
    }

    fn overrides(&self) -> BTreeMap<String, f64> {
        [
            ("theta", self.theta),
            ("mu", self.mu),
            ("sigma", self.sigma),
            ("tau2", self.tau2),
            ("s", self.s),
            ("nu", self.nu),
            ("x0", self.x0),
            ("delta", self.delta),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect()
    }

    pub fn build_model(&self) -> Result<ModelSpec> {
        builtin_model(self.model_name()?, &self.overrides())
    }

    /// Fills every key the command uses and validates the result.
    pub fn resolve(&self, command: Command) -> Result<Self> {
        let mut c = self.clone();
        let model = c.build_model()?;
        for (key, value) in model.constants() {
            let slot = match key.as_str() {
                "theta" => &mut c.theta,
                "mu" => &mut c.mu,
                "sigma" => &mut c.sigma,
                "tau2" => &mut c.tau2,
                "s" => &mut c.s,
                "nu" => &mut c.nu,
                "x0" => &mut c.x0,
                "delta" => &mut c.delta,
                _ => continue,
            };
            *slot = Some(*value);
        }
        c.model = Some(c.model_name()?.as_str().to_string());
        c.seed.get_or_insert(0);
        c.output.get_or_insert_with(|| "out".to_string());
        if c.data.is_some() && c.returns.is_some() {
            return Err(Error::Config("`data` and `returns` are mutually exclusive".into()));
        }
        if c.data.is_none() && c.returns.is_none() {
            let n = if command == Command::Rates { DEFAULT_RATE_OBSERVATIONS } else { DEFAULT_OBSERVATIONS };
            c.observations.get_or_insert(n);
            c.truth_level.get_or_insert(10);
            if matches!(command, Command::Rates | Command::Bench) {
                c.datasets.get_or_insert(1);
            }
        } else if c.datasets.is_some_and(|d| d != 1) {
            return Err(Error::Config("`datasets` needs synthetic observations".into()));
        }
        if c.observations == Some(0) || c.datasets == Some(0) {
            return Err(Error::Config("`observations` and `datasets` must be positive".into()));
        }
        if command != Command::Simulate && command != Command::Kalman {
            let ess = *c.ess_fraction.get_or_insert(0.25);
            if !(ess > 0.0 && ess <= 1.0) {
                return Err(Error::Config(format!("ess_fraction must lie in (0, 1], got {ess}")));
            }
        }
        match command {
            Command::Simulate | Command::Kalman => {}
            Command::Pf => {
                c.level.get_or_insert(5);
                c.particles.get_or_insert(1000);
            }
            Command::Mlpf => {
                c.level.get_or_insert(5);
            }
            Command::Rates => {
                c.max_level.get_or_insert(7);
                c.particles.get_or_insert(500);
                c.repetitions.get_or_insert(100);
            }
            Command::Bench => {
                c.min_level.get_or_insert(1);
                c.max_level.get_or_insert(5);
                c.repetitions.get_or_insert(50);
                c.methods.get_or_insert_with(|| vec!["pf".into(), "mlpf".into()]);
                c.record_walltime.get_or_insert(false);
                if model.name().is_some_and(|n| matches!(n, ModelName::Langevin | ModelName::Nlm)) {
                    let d = ReferenceSettings::default();
                    c.reference_level.get_or_insert(d.level);
                    c.reference_particles.get_or_insert(d.particles);
                    c.reference_seeds.get_or_insert(d.seeds);
                }
            }
        }
        if let Some(methods) = &c.methods {
            for m in methods {
                m.parse::<Method>()?;
            }
        }
        if let (Some(lo), Some(hi)) = (c.min_level, c.max_level) {
            if lo > hi {
                return Err(Error::Config(format!("min_level {lo} exceeds max_level {hi}")));
            }
        }
        Ok(c)
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().flatten().map(|m| m.parse()).collect()
    }

    pub fn reference_settings(&self) -> ReferenceSettings {
        let d = ReferenceSettings::default();
        ReferenceSettings {
            level: self.reference_level.unwrap_or(d.level),
            particles: self.reference_particles.unwrap_or(d.particles),
            seeds: self.reference_seeds.unwrap_or(d.seeds),
            ess_fraction: self.ess_fraction.unwrap_or(d.ess_fraction),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.output.as_deref().unwrap_or("out"))
    }

    /// The configuration as `#`-prefixed lines, framed by the embed markers.
    pub fn embedded_header(&self) -> String {
        let mut out = String::new();
        out.push_str(EMBED_BEGIN);
        out.push('\n');
        for line in self.to_toml().lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(EMBED_END);
        out.push('\n');
        out
    }
}

/// Recovers the configuration text embedded by [`ExperimentConfig::embedded_header`].
pub fn extract_embedded(text: &str) -> Option<String> {
    let mut lines = text.lines();
    lines.by_ref().find(|l| l.trim_end() == EMBED_BEGIN)?;
    let mut body = String::new();
    for line in lines {
        if line.trim_end() == EMBED_END {
            return Some(body);
        }
        body.push_str(line.strip_prefix("# ").or_else(|| line.strip_prefix('#')).unwrap_or(line));
        body.push('\n');
    }
    None
}
