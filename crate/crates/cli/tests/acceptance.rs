//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits 0 after reporting unless `MLPF_ACCEPTANCE_STRICT=1`, in which case
//! any failing criterion makes the process exit 1.

use std::fs;
use std::path::Path;
use std::time::Instant;

use mlpf::config::{Command, ExperimentConfig};
use mlpf::experiment::Method;
use mlpf::model::{ObsDensity, TestFunction};
use mlpf::{
    builtin, coupled_pf_run, coupled_resample, kalman_gbm, kalman_ou, level_allocation, mlpf_run, pf_run,
    simulate_coupled_transition, simulate_dataset, AllocationMode, LevelIndex, ModelName, ModelSpec, StreamKey,
};
use mlpf_cli::{cost_study, rates_study, run_cli};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEED: u64 = 20_240_601;

const CONSTANT_BAND: (f64, f64) = (0.75, 1.25);
const GENERAL_BAND: (f64, f64) = (0.3, 0.7);
const PF_COST_BAND: (f64, f64) = (-1.75, -1.25);
const MLPF_COST_BAND: (f64, f64) = (-1.45, -0.85);

/// Rate study: levels 1..=7, R = 100 per level.
const RATE_MAX_LEVEL: u32 = 7;
const RATE_REPETITIONS: usize = 100;
const RATE_PARTICLES: usize = 500;
const RATE_OBSERVATIONS: usize = 100;
/// Cost study: L = 1..=5, R = 50 per level.
const COST_REPETITIONS: usize = 50;
const COST_OBSERVATIONS: usize = 20;
/// Independent synthetic datasets averaged in the rate and cost studies.
const STUDY_DATASETS: usize = 4;
const REFERENCE_PARTICLES: usize = 20_000;

const KALMAN_LEVEL: u32 = 8;
const KALMAN_PARTICLES: usize = 10_000;
const KALMAN_DATASETS: u64 = 20;
const KALMAN_REPLICATES: usize = 20;
const KALMAN_OBSERVATIONS: usize = 20;

const CHI_PAIRS: usize = 50;
const CHI_DRAWS: usize = 100_000;
const CHI_ALPHA: f64 = 0.01;

const Z_RUNS: usize = 2000;
const Z_OBSERVATIONS: usize = 10;
const Z_LEVEL: u32 = 2;

struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: &str, started: Instant) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id}] {name}: {detail} ({:.0}s)", started.elapsed().as_secs_f64());
        if pass {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
    }
}

fn within(x: Option<f64>, band: (f64, f64)) -> bool {
    x.is_some_and(|x| x >= band.0 && x <= band.1)
}

fn fmt_slope(x: Option<f64>) -> String {
    x.map_or("none".to_string(), |x| format!("{x:.3}"))
}

fn config(text: &str, command: Command) -> ExperimentConfig {
    ExperimentConfig::parse(text).unwrap().resolve(command).unwrap()
}

fn rates_config(model: ModelName) -> ExperimentConfig {
    config(
        &format!(
            "model = \"{model}\"\nseed = {SEED}\nmax_level = {RATE_MAX_LEVEL}\nrepetitions = {RATE_REPETITIONS}\n\
             particles = {RATE_PARTICLES}\nobservations = {RATE_OBSERVATIONS}\ndatasets = {STUDY_DATASETS}\n"
        ),
        Command::Rates,
    )
}

fn strong_rates(report: &mut Report) {
    let started = Instant::now();
    let mut slopes = Vec::new();
    for model in [ModelName::Ou, ModelName::Gbm, ModelName::Nlm] {
        let (_, r) = rates_study(&rates_config(model)).unwrap();
        for (l, why) in &r.failures {
            println!("  {model}: level {l} failed: {why}");
        }
        println!(
            "  {model}: var slope {} one_minus_p slope {} | var {:?} | 1-p {:?}",
            fmt_slope(r.variance.slope()),
            fmt_slope(r.coupling.slope()),
            r.variance.values.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
            r.coupling.values.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        );
        slopes.push((model, r.variance.slope(), r.coupling.slope()));
    }
    let band = |m: ModelName| if m == ModelName::Ou { CONSTANT_BAND } else { GENERAL_BAND };

    let (_, ou_var, _) = slopes[0];
    report.record(
        1,
        "OU increment-variance slope",
        within(ou_var, CONSTANT_BAND),
        &format!("slope {} in {CONSTANT_BAND:?}", fmt_slope(ou_var)),
        started,
    );

    let pass = slopes[1..].iter().all(|(_, v, _)| within(*v, GENERAL_BAND));
    let detail: Vec<String> =
        slopes[1..].iter().map(|(m, v, _)| format!("{m} {}", fmt_slope(*v))).collect();
    report.record(
        2,
        "GBM and NLM increment-variance slopes",
        pass,
        &format!("{} in {GENERAL_BAND:?}", detail.join(", ")),
        started,
    );

    let pass = slopes.iter().all(|(m, _, p)| within(*p, band(*m)));
    let detail: Vec<String> =
        slopes.iter().map(|(m, _, p)| format!("{m} {} in {:?}", fmt_slope(*p), band(*m))).collect();
    report.record(3, "1 - p_l(n) slopes", pass, &detail.join(", "), started);
}

fn cost_slopes(report: &mut Report) {
    let started = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for model in ModelName::ALL {
        let cfg = config(
            &format!(
                "model = \"{model}\"\nseed = {SEED}\nmin_level = 1\nmax_level = 5\nrepetitions = {COST_REPETITIONS}\n\
                 observations = {COST_OBSERVATIONS}\ndatasets = {STUDY_DATASETS}\nreference_particles = {REFERENCE_PARTICLES}\n"
            ),
            Command::Bench,
        );
        let study = cost_study(&cfg).unwrap();
        let slope = |m: Method| study.results.iter().find(|r| r.method == m).unwrap().fit.slope;
        let (pf, ml) = (slope(Method::Pf), slope(Method::Mlpf));
        let ok = within(Some(pf), PF_COST_BAND) && within(Some(ml), MLPF_COST_BAND) && ml.abs() < pf.abs();
        for r in &study.results {
            println!(
                "  {model} {}: slope {:.3} ± {:.3}, mse {:?}",
                r.method,
                r.fit.slope,
                r.fit.slope_stderr,
                r.rows.iter().map(|row| format!("{:.3e}", row.mse)).collect::<Vec<_>>()
            );
        }
        pass &= ok;
        detail.push(format!("{model} PF {pf:.3} MLPF {ml:.3}{}", if ok { "" } else { " (out)" }));
    }
    report.record(
        4,
        "cost-vs-MSE slopes",
        pass,
        &format!("{}; PF in {PF_COST_BAND:?}, MLPF in {MLPF_COST_BAND:?}, |MLPF| < |PF|", detail.join(", ")),
        started,
    );
}

fn kalman_agreement(report: &mut Report) {
    let started = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for (mi, model) in [ModelName::Ou, ModelName::Gbm].into_iter().enumerate() {
        let m = builtin(model, &[]).unwrap();
        let root = StreamKey::new(SEED).child(5).child(mi as u64);
        let mut misses = 0;
        let mut worst: f64 = 0.0;
        for d in 0..KALMAN_DATASETS {
            let data = simulate_dataset(&m, KALMAN_OBSERVATIONS, 10, root.child(d).child(0)).unwrap();
            let exact = match model {
                ModelName::Ou => kalman_ou(&m, &data.observations).unwrap().last().unwrap().mean,
                _ => kalman_gbm(&m, &data.observations).unwrap().last().unwrap().mean,
            };
            let finals: Vec<f64> = (0..KALMAN_REPLICATES)
                .map(|r| {
                    let out = pf_run(
                        &m,
                        &data.observations,
                        LevelIndex(KALMAN_LEVEL),
                        KALMAN_PARTICLES,
                        0.25,
                        root.child(d).child(1).child(r as u64),
                    )
                    .unwrap();
                    *out.filter.last().unwrap()
                })
                .collect();
            let r = finals.len() as f64;
            let mean = finals.iter().sum::<f64>() / r;
            let se = (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0) / r).sqrt();
            let z = (mean - exact).abs() / se;
            worst = worst.max(z);
            if z > 3.0 {
                misses += 1;
            }
        }
        pass &= misses == 0;
        detail.push(format!("{model}: {misses}/{KALMAN_DATASETS} outside 3 SE (max {worst:.2} SE)"));
    }
    report.record(5, "PF agrees with the Kalman filter", pass, &detail.join(", "), started);
}

fn chi_square_marginals(report: &mut Report) {
    let started = Instant::now();
    let mut rng = StreamKey::new(SEED).child(6).stream();
    let mut failures = 0;
    let mut min_p: f64 = 1.0;
    for pair in 0..CHI_PAIRS {
        let k = rng.random_range(2..=40usize);
        let w1 = random_weights(&mut rng, k);
        // Alternate independent pairs with close pairs, which couple often.
        let w2 = if pair % 2 == 0 {
            random_weights(&mut rng, k)
        } else {
            let raw: Vec<f64> = w1.iter().map(|w| w * rng.random_range(0.8..1.25)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|w| w / s).collect()
        };
        let mut c1 = vec![0u64; k];
        let mut c2 = vec![0u64; k];
        let calls = CHI_DRAWS.div_ceil(k);
        for _ in 0..calls {
            let idx = coupled_resample(&w1, &w2, &mut rng).unwrap();
            for (&a, &b) in idx.first.iter().zip(&idx.second) {
                c1[a] += 1;
                c2[b] += 1;
            }
        }
        let total = (calls * k) as f64;
        for (counts, w) in [(&c1, &w1), (&c2, &w2)] {
            let p = chi_square_p(counts, w, total);
            min_p = min_p.min(p);
            if p <= CHI_ALPHA {
                failures += 1;
            }
        }
    }
    report.record(
        6,
        "coupled resampling preserves both marginals",
        failures == 0,
        &format!(
            "{failures}/{} marginal tests at p <= {CHI_ALPHA} (min p {min_p:.4}), {CHI_PAIRS} pairs x {CHI_DRAWS} draws",
            2 * CHI_PAIRS
        ),
        started,
    );
}

fn random_weights<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

fn chi_square_p(counts: &[u64], w: &[f64], total: f64) -> f64 {
    let mut stat = 0.0;
    let mut cells = 0;
    for (&c, &p) in counts.iter().zip(w) {
        if p > 0.0 {
            let e = p * total;
            stat += (c as f64 - e).powi(2) / e;
            cells += 1;
        } else if c > 0 {
            return 0.0;
        }
    }
    if cells < 2 {
        return 1.0;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

fn normalizing_constant(report: &mut Report) {
    let started = Instant::now();
    let m = builtin(ModelName::Ou, &[]).unwrap();
    let root = StreamKey::new(SEED).child(7);
    let data = simulate_dataset(&m, Z_OBSERVATIONS, 10, root.child(0)).unwrap();
    let mut cis = Vec::new();
    for (i, n) in [25usize, 400].into_iter().enumerate() {
        let z: Vec<f64> = (0..Z_RUNS)
            .map(|r| {
                let out = pf_run(&m, &data.observations, LevelIndex(Z_LEVEL), n, 1.0, root.child(1 + i as u64).child(r as u64))
                    .unwrap();
                out.log_normalizing_constant.exp()
            })
            .collect();
        let k = z.len() as f64;
        let mean = z.iter().sum::<f64>() / k;
        let se = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
        cis.push((n, mean, mean - 1.96 * se, mean + 1.96 * se));
    }
    let overlap = cis[0].2 <= cis[1].3 && cis[1].2 <= cis[0].3;
    let detail: Vec<String> =
        cis.iter().map(|(n, m, lo, hi)| format!("N={n}: {m:.4e} [{lo:.4e}, {hi:.4e}]")).collect();
    report.record(7, "normalizing-constant unbiasedness", overlap, &detail.join(", "), started);
}

fn trivial_invariants(report: &mut Report) {
    let started = Instant::now();
    let mut problems = Vec::new();

    // Test function one: increments vanish and the estimate is exactly 1.
    let one = builtin(ModelName::Ou, &[]).unwrap().with_test_function(TestFunction::One);
    let data = simulate_dataset(&one, 15, 8, StreamKey::new(SEED).child(8)).unwrap();
    let alloc = level_allocation(4, &one, AllocationMode::Defaults).unwrap();
    let out = mlpf_run(&one, &data.observations, &alloc, 0.25, StreamKey::new(SEED).child(9)).unwrap();
    if out.levels[1..].iter().any(|l| l.increments.iter().any(|a| *a != 0.0)) {
        problems.push("non-zero increment with phi = 1");
    }
    if out.estimates.iter().any(|e| *e != 1.0) {
        problems.push("MLPF estimate differs from 1 with phi = 1");
    }

    // Identical weights: every index pair is common.
    let mut rng = StreamKey::new(SEED).child(10).stream();
    for _ in 0..100 {
        let w = random_weights(&mut rng, 30);
        let idx = coupled_resample(&w, &w, &mut rng).unwrap();
        if idx.first != idx.second || idx.coupled.iter().any(|c| !c) {
            problems.push("identical weights produced a distinct index");
            break;
        }
    }

    // Zero drift, constant diffusion: fine and coarse paths coincide.
    let free = builtin(ModelName::Ou, &[("theta", 0.0)]).unwrap();
    let mut noise = StreamKey::new(SEED).child(11).stream();
    for l in 1..=10 {
        for _ in 0..100 {
            let x0 = noise.random_range(-2.0..2.0);
            let (f, c) = simulate_coupled_transition(&free, x0, x0, LevelIndex(l), &mut noise).unwrap();
            if f.to_bits() != c.to_bits() {
                problems.push("coupled paths differ without drift");
                break;
            }
        }
    }
    let flat: ModelSpec = free.with_obs_density(ObsDensity::Constant { log_value: 0.0 });
    let obs = mlpf::observations(&[0.0; 12]);
    for l in 1..=6 {
        let c = coupled_pf_run(&flat, &obs, LevelIndex(l), 64, 0.5, StreamKey::new(SEED).child(12).child(l as u64))
            .unwrap();
        if c.increments.iter().any(|a| *a != 0.0) || c.coupled_fraction.iter().any(|p| *p != 1.0) {
            problems.push("coupled filter drifted apart without drift and likelihood");
            break;
        }
    }

    let detail = if problems.is_empty() { "all hold".to_string() } else { problems.join("; ") };
    report.record(8, "trivial invariants", problems.is_empty(), &detail, started);
}

fn cli_determinism(report: &mut Report) {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("ou.toml");
    let out = dir.path().join("out");
    let mut problems = Vec::new();
    let runs: [(&str, &str); 6] = [
        ("simulate", "model = \"ou\"\nobservations = 15\n"),
        ("pf", "model = \"nlm\"\nlevel = 4\nparticles = 200\n"),
        ("mlpf", "model = \"ou\"\nlevel = 3\n"),
        ("rates", "model = \"gbm\"\nmax_level = 4\nrepetitions = 10\nparticles = 50\nobservations = 30\n"),
        (
            "bench",
            "model = \"langevin\"\nmax_level = 3\nrepetitions = 4\nreference_level = 4\nreference_particles = 500\nreference_seeds = 2\n",
        ),
        ("kalman", "model = \"gbm\"\n"),
    ];
    for (command, text) in runs {
        fs::write(&cfg_path, text).unwrap();
        let argv = |seed: &str| {
            vec![
                "mlpf".to_string(),
                command.to_string(),
                "--config".to_string(),
                cfg_path.display().to_string(),
                "--seed".to_string(),
                seed.to_string(),
                "--out".to_string(),
                out.display().to_string(),
            ]
        };
        let _ = fs::remove_dir_all(&out);
        if run_cli(argv("1")) != 0 {
            problems.push(format!("{command}: run failed"));
            continue;
        }
        let first = snapshot(&out);
        fs::remove_dir_all(&out).unwrap();
        run_cli(argv("1"));
        if snapshot(&out) != first {
            problems.push(format!("{command}: rerun differs"));
        }
        // Rerunning from a result file's embedded configuration.
        let (name, _) = &first[0];
        let embedded = dir.path().join("embedded.csv");
        fs::copy(out.join(name), &embedded).unwrap();
        fs::remove_dir_all(&out).unwrap();
        let argv_embedded = vec![
            "mlpf".to_string(),
            command.to_string(),
            "--config".to_string(),
            embedded.display().to_string(),
        ];
        run_cli(argv_embedded);
        if snapshot(&out) != first {
            problems.push(format!("{command}: embedded-config rerun differs"));
        }
    }
    let missing = dir.path().join("missing.toml");
    if run_cli(["mlpf", "pf", "--config", missing.to_str().unwrap()]) == 0 {
        problems.push("missing config accepted".to_string());
    }
    let detail = if problems.is_empty() { "6 commands byte-identical on rerun".to_string() } else { problems.join("; ") };
    report.record(9, "CLI determinism", problems.is_empty(), &detail, started);
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .map(|rd| {
            rd.map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

fn main() {
    let started = Instant::now();
    let mut report = Report { passed: 0, failed: 0 };
    println!("acceptance criteria (seed {SEED})");
    strong_rates(&mut report);
    cost_slopes(&mut report);
    kalman_agreement(&mut report);
    chi_square_marginals(&mut report);
    normalizing_constant(&mut report);
    trivial_invariants(&mut report);
    cli_determinism(&mut report);
    println!(
        "{} passed, {} failed, {:.0}s",
        report.passed,
        report.failed,
        started.elapsed().as_secs_f64()
    );
    let strict = std::env::var("MLPF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && report.failed > 0 {
        std::process::exit(1);
    }
}
