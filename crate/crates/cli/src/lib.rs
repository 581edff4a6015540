//! The `mlpf` command-line driver.
//!
//! Every subcommand reads a flat TOML configuration (`--config`), resolves
//! it, runs, and writes CSV files into the output directory. Each file starts
//! with the resolved configuration as `#` comment lines, so any result file
//! can be passed back as `--config` to reproduce it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mlpf::config::{Command, ExperimentConfig};
use mlpf::experiment::{configure_workers, ExperimentResult};
use mlpf::{
    estimate_strong_rates, filter_truth, ingest_returns, kalman_gbm, kalman_ou, level_allocation, mlpf_run,
    mse_vs_cost, pf_run, pool_cost, pool_rates, read_observations, simulate_dataset, AllocationMode,
    CostSettings, Dataset, Error, LevelIndex, ModelSpec, Observation, RateSettings, Reference, Result,
    StrongRates, StreamKey, TruthSource,
};

#[derive(Debug, Parser)]
#[command(name = "mlpf", version, about = "Multilevel particle filters for partially observed diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Simulate a latent path and its observations.
    Simulate(CommonArgs),
    /// Run a single-level particle filter.
    Pf(CommonArgs),
    /// Run the multilevel particle filter.
    Mlpf(CommonArgs),
    /// Estimate strong-error rates from coupled filters.
    Rates(CommonArgs),
    /// Cost against MSE for PF and MLPF.
    Bench(CommonArgs),
    /// Exact Kalman filter for the OU and GBM models.
    Kalman(CommonArgs),
}

#[derive(Debug, clap::Args)]
struct CommonArgs {
    /// Configuration file (or a result file with an embedded configuration).
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Cmd {
    fn split(self) -> (Command, CommonArgs) {
        match self {
            Cmd::Simulate(a) => (Command::Simulate, a),
            Cmd::Pf(a) => (Command::Pf, a),
            Cmd::Mlpf(a) => (Command::Mlpf, a),
            Cmd::Rates(a) => (Command::Rates, a),
            Cmd::Bench(a) => (Command::Bench, a),
            Cmd::Kalman(a) => (Command::Kalman, a),
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 on a run-time error, 2 on a usage
/// error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (command, args) = cli.command.split();
    match run(command, &args) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command, args: &CommonArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &args.out {
        cfg.output = Some(out.to_string_lossy().into_owned());
    }
    let cfg = cfg.resolve(command)?;
    configure_workers()?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    match command {
        Command::Simulate => simulate(&cfg, &dir),
        Command::Pf => pf(&cfg, &dir),
        Command::Mlpf => mlpf(&cfg, &dir),
        Command::Rates => rates(&cfg, &dir),
        Command::Bench => bench(&cfg, &dir),
        Command::Kalman => kalman(&cfg, &dir),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn master(cfg: &ExperimentConfig) -> StreamKey {
    StreamKey::new(cfg.seed.unwrap_or(0))
}

/// Stream of synthetic dataset `d`.
pub fn dataset_key(cfg: &ExperimentConfig, d: usize) -> StreamKey {
    master(cfg).child(0).child(d as u64)
}

/// Stream of the filters run on dataset `d`.
pub fn run_key(cfg: &ExperimentConfig, d: usize) -> StreamKey {
    master(cfg).child(1).child(d as u64)
}

/// Stream of the reference filter for dataset `d`.
pub fn reference_key(cfg: &ExperimentConfig, d: usize) -> StreamKey {
    master(cfg).child(2).child(d as u64)
}

/// Synthetic datasets requested by a resolved configuration.
pub fn synthetic_datasets(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Vec<Dataset>> {
    let n = cfg.observations.ok_or_else(|| Error::Config("missing `observations`".into()))?;
    let truth_level = cfg.truth_level.unwrap_or(10);
    (0..cfg.datasets.unwrap_or(1)).map(|d| simulate_dataset(model, n, truth_level, dataset_key(cfg, d))).collect()
}

/// Observation sequences of a resolved configuration: the data or returns
/// file if one is given, otherwise the synthetic datasets.
pub fn observation_sets(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Vec<Vec<Observation>>> {
    if let Some(path) = &cfg.data {
        return Ok(vec![read_observations(Path::new(path))?]);
    }
    if let Some(path) = &cfg.returns {
        return Ok(vec![ingest_returns(Path::new(path))?.observations()]);
    }
    Ok(synthetic_datasets(cfg, model)?.into_iter().map(|d| d.observations).collect())
}

fn rate_settings(cfg: &ExperimentConfig) -> RateSettings {
    RateSettings {
        max_level: cfg.max_level.unwrap_or(7),
        repetitions: cfg.repetitions.unwrap_or(100),
        particles: cfg.particles.unwrap_or(500),
        ess_fraction: cfg.ess_fraction.unwrap_or(0.25),
    }
}

/// Strong-rate study of a resolved `rates` configuration, averaged over its
/// datasets.
pub fn rates_study(cfg: &ExperimentConfig) -> Result<(ModelSpec, StrongRates)> {
    let model = cfg.build_model()?;
    let settings = rate_settings(cfg);
    let studies = observation_sets(cfg, &model)?
        .iter()
        .enumerate()
        .map(|(d, obs)| estimate_strong_rates(&model, obs, settings, run_key(cfg, d)))
        .collect::<Result<Vec<_>>>()?;
    let pooled = pool_rates(&studies)?;
    Ok((model, pooled))
}

/// Result of [`cost_study`].
pub struct CostStudy {
    pub model: ModelSpec,
    /// One pooled result per configured method.
    pub results: Vec<ExperimentResult>,
    /// Truth used for each dataset.
    pub truths: Vec<Reference>,
    pub truth_source: TruthSource,
}

/// Cost-versus-MSE study of a resolved `bench` configuration, averaged over
/// its datasets.
pub fn cost_study(cfg: &ExperimentConfig) -> Result<CostStudy> {
    let model = cfg.build_model()?;
    let settings = CostSettings {
        min_level: cfg.min_level.unwrap_or(1),
        max_level: cfg.max_level.unwrap_or(5),
        repetitions: cfg.repetitions.unwrap_or(50),
        ess_fraction: cfg.ess_fraction.unwrap_or(0.25),
    };
    let sets = observation_sets(cfg, &model)?;
    let mut truths = Vec::new();
    let mut source = TruthSource::ReferencePf;
    for (d, obs) in sets.iter().enumerate() {
        let (truth, s) = filter_truth(&model, obs, cfg.reference_settings(), reference_key(cfg, d))?;
        truths.push(truth);
        source = s;
    }
    let mut results = Vec::new();
    for method in cfg.methods()? {
        let per_dataset = sets
            .iter()
            .zip(&truths)
            .enumerate()
            .map(|(d, (obs, truth))| mse_vs_cost(&model, obs, method, settings, truth, run_key(cfg, d)))
            .collect::<Result<Vec<_>>>()?;
        results.push(pool_cost(&per_dataset)?);
    }
    Ok(CostStudy { model, results, truths, truth_source: source })
}

struct Table {
    path: PathBuf,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(dir: &Path, name: &str, header: &[&str]) -> Self {
        Table { path: dir.join(name), rows: vec![header.iter().map(|s| s.to_string()).collect()] }
    }

    fn row(&mut self, fields: Vec<String>) {
        self.rows.push(fields);
    }

    fn write(self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let mut buf = cfg.embedded_header().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for r in &self.rows {
                w.write_record(r)?;
            }
            w.flush().map_err(|e| io_error(&self.path, e))?;
        }
        let mut file = fs::File::create(&self.path).map_err(|e| io_error(&self.path, e))?;
        file.write_all(&buf).map_err(|e| io_error(&self.path, e))?;
        Ok(self.path)
    }
}

fn s<T: ToString>(v: T) -> String {
    v.to_string()
}

fn single_observations(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Vec<Observation>> {
    let mut sets = observation_sets(cfg, model)?;
    if sets.len() != 1 {
        return Err(Error::Config("this command runs on a single dataset; set `datasets = 1`".into()));
    }
    Ok(sets.remove(0))
}

fn simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    if cfg.data.is_some() || cfg.returns.is_some() {
        return Err(Error::Config("`simulate` generates data; remove `data`/`returns`".into()));
    }
    let model = cfg.build_model()?;
    let mut files = Vec::new();
    for (d, ds) in synthetic_datasets(cfg, &model)?.iter().enumerate() {
        let name = if d == 0 { "dataset.csv".to_string() } else { format!("dataset_{d}.csv") };
        let mut t = Table::new(dir, &name, &["step", "time", "latent", "y"]);
        for (x, o) in ds.latent.iter().zip(&ds.observations) {
            t.row(vec![s(o.index), s(o.index as f64 * ds.delta), s(x), s(o.value)]);
        }
        files.push(t.write(cfg)?);
    }
    Ok(files)
}

fn pf(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let model = cfg.build_model()?;
    let obs = single_observations(cfg, &model)?;
    let level = cfg.level.unwrap_or(5);
    let n = cfg.particles.unwrap_or(1000);
    let out = pf_run(&model, &obs, LevelIndex(level), n, cfg.ess_fraction.unwrap_or(0.25), run_key(cfg, 0))?;
    let mut t = Table::new(dir, "pf.csv", &["step", "y", "predictor", "filter", "ess", "resampled", "log_z"]);
    for (i, o) in obs.iter().enumerate() {
        t.row(vec![
            s(o.index),
            s(o.value),
            s(out.predictor[i]),
            s(out.filter[i]),
            s(out.ess[i]),
            s(u8::from(out.resampled[i])),
            s(out.log_z_trace[i]),
        ]);
    }
    let mut summary = Table::new(dir, "summary.csv", &["key", "value"]);
    summary.row(vec![s("level"), s(level)]);
    summary.row(vec![s("particles"), s(n)]);
    summary.row(vec![s("cost"), s(out.cost)]);
    summary.row(vec![s("log_normalizing_constant"), s(out.log_normalizing_constant)]);
    summary.row(vec![s("resample_count"), s(out.resampled.iter().filter(|r| **r).count())]);
    summary.row(vec![s("clamp_count"), s(out.clamp_count)]);
    summary.row(vec![s("capped_count"), s(out.capped_count)]);
    Ok(vec![t.write(cfg)?, summary.write(cfg)?])
}

fn mlpf(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let model = cfg.build_model()?;
    let obs = single_observations(cfg, &model)?;
    let alloc = level_allocation(cfg.level.unwrap_or(5), &model, AllocationMode::Defaults)?;
    let out = mlpf_run(&model, &obs, &alloc, cfg.ess_fraction.unwrap_or(0.25), run_key(cfg, 0))?;
    let mut t = Table::new(dir, "mlpf.csv", &["step", "y", "estimate"]);
    for (o, e) in obs.iter().zip(&out.estimates) {
        t.row(vec![s(o.index), s(o.value), s(e)]);
    }
    let mut levels = Table::new(
        dir,
        "levels.csv",
        &["level", "particles", "step", "increment", "coupled_fraction", "fine_ess", "coarse_ess", "resampled"],
    );
    for lvl in &out.levels {
        for (i, o) in obs.iter().enumerate() {
            levels.row(vec![
                s(lvl.level),
                s(lvl.particles),
                s(o.index),
                s(lvl.increments[i]),
                s(lvl.coupled_fraction[i]),
                s(lvl.fine_ess[i]),
                s(lvl.coarse_ess[i]),
                s(u8::from(lvl.resampled[i])),
            ]);
        }
    }
    let mut summary = Table::new(dir, "mlpf_summary.csv", &["key", "value"]);
    summary.row(vec![s("max_level"), s(alloc.max_level)]);
    summary.row(vec![s("beta"), s(alloc.beta)]);
    summary.row(vec![s("base_particles"), s(alloc.base_particles)]);
    summary.row(vec![s("cost"), s(out.cost)]);
    Ok(vec![t.write(cfg)?, levels.write(cfg)?, summary.write(cfg)?])
}

fn rates(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let (model, r) = rates_study(cfg)?;
    let name = model.name().map_or("custom", |n| n.as_str());
    let mut t = Table::new(dir, "rates.csv", &["model", "l", "h", "var", "one_minus_p", "one_minus_p_mean", "R"]);
    for i in 0..r.variance.levels.len() {
        t.row(vec![
            s(name),
            s(r.variance.levels[i]),
            s(r.variance.step_sizes[i]),
            s(r.variance.values[i]),
            s(r.coupling.values[i]),
            s(r.coupling_step_mean[i]),
            s(r.variance.repetitions),
        ]);
    }
    let mut slopes = Table::new(dir, "slopes.csv", &["model", "method", "slope", "stderr"]);
    for (label, series) in [("variance", &r.variance), ("one_minus_p", &r.coupling)] {
        let (slope, se) = series.fit.map_or((s("NA"), s("NA")), |f| (s(f.slope), s(f.slope_stderr)));
        slopes.row(vec![s(name), s(label), slope, se]);
    }
    for (l, why) in &r.failures {
        eprintln!("warning: level {l} failed: {why}");
    }
    Ok(vec![t.write(cfg)?, slopes.write(cfg)?])
}

fn bench(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let study = cost_study(cfg)?;
    let name = study.model.name().map_or("custom", |n| n.as_str());
    let walltime = cfg.record_walltime.unwrap_or(false);
    let mut cost = Table::new(dir, "cost.csv", &["model", "method", "L", "mse", "cost", "walltime"]);
    let mut slopes = Table::new(dir, "slopes.csv", &["model", "method", "slope", "stderr"]);
    for res in &study.results {
        for row in &res.rows {
            let wt = if walltime { s(row.walltime) } else { s("NA") };
            cost.row(vec![s(name), s(res.method), s(row.level), s(row.mse), s(row.cost), wt]);
        }
        slopes.row(vec![s(name), s(res.method), s(res.fit.slope), s(res.fit.slope_stderr)]);
    }
    let mut truth = Table::new(dir, "truth.csv", &["dataset", "step", "value", "stderr", "source"]);
    for (d, r) in study.truths.iter().enumerate() {
        for (i, (v, se)) in r.values.iter().zip(&r.stderr).enumerate() {
            truth.row(vec![s(d), s(i + 1), s(v), s(se), s(study.truth_source.as_str())]);
        }
    }
    Ok(vec![cost.write(cfg)?, slopes.write(cfg)?, truth.write(cfg)?])
}

fn kalman(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let model = cfg.build_model()?;
    let obs = single_observations(cfg, &model)?;
    let mut t;
    if let Ok(post) = kalman_ou(&model, &obs) {
        t = Table::new(dir, "kalman.csv", &["step", "y", "mean", "variance"]);
        for (o, k) in obs.iter().zip(&post) {
            t.row(vec![s(o.index), s(o.value), s(k.mean), s(k.variance)]);
        }
    } else if let Ok(post) = kalman_gbm(&model, &obs) {
        t = Table::new(dir, "kalman.csv", &["step", "y", "mean", "log_mean", "log_variance"]);
        for (o, k) in obs.iter().zip(&post) {
            t.row(vec![s(o.index), s(o.value), s(k.mean), s(k.log_state.mean), s(k.log_state.variance)]);
        }
    } else {
        return Err(Error::Config("`kalman` needs the ou or gbm model".into()));
    }
    Ok(vec![t.write(cfg)?])
}
