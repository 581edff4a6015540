//! Synthetic datasets and return-series ingestion.
//!
//! All files are UTF-8 CSV with a header row, `.` decimal separator and LF
//! line endings. Lines starting with `#` are comments.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::{simulate_transition, LevelIndex};
use crate::model::{observations, ModelSpec, Observation};
use crate::rng::StreamKey;

/// Sub-stream of the latent path.
const ROLE_LATENT: u64 = 0;
/// Sub-stream of the observation noise.
const ROLE_NOISE: u64 = 1;

/// A simulated latent path with its observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Latent state at each observation time `kδ`, `k = 1..n`.
    pub latent: Vec<f64>,
    pub observations: Vec<Observation>,
    pub delta: f64,
}

/// Simulates the latent diffusion at level `truth_level` and draws one
/// observation per interval from the model's observation density.
pub fn simulate_dataset(model: &ModelSpec, n: usize, truth_level: u32, key: StreamKey) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("need at least one observation".into()));
    }
    let mut latent_rng = key.child(ROLE_LATENT).stream();
    let mut noise_rng = key.child(ROLE_NOISE).stream();
    let mut x = model.initial_state();
    let mut latent = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        x = simulate_transition(model, x, LevelIndex(truth_level), &mut latent_rng)?;
        latent.push(x);
        ys.push(model.obs_density().sample(x, &mut noise_rng)?);
    }
    Ok(Dataset { latent, observations: observations(&ys), delta: model.delta() })
}

impl Dataset {
    /// Writes `step,time,latent,y` rows after an optional comment header.
    pub fn write_to<W: Write>(&self, mut out: W, header: &str) -> Result<()> {
        out.write_all(header.as_bytes()).map_err(|e| Error::io("<dataset>", e))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "time", "latent", "y"])?;
        for (x, o) in self.latent.iter().zip(&self.observations) {
            let t = o.index as f64 * self.delta;
            w.write_record([o.index.to_string(), t.to_string(), x.to_string(), o.value.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<dataset>", e))?;
        Ok(())
    }
}

/// Reads observations from the `y` column of a CSV file.
pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| wrap_open(path, e))?;
    let headers = r.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == "y")
        .ok_or_else(|| Error::Ingest { row: 1, message: format!("{}: no `y` column", path.display()) })?;
    let mut ys = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let v: f64 = rec
            .get(col)
            .and_then(|s| s.trim().parse().ok())
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Ingest { row, message: "unparseable observation".into() })?;
        ys.push(v);
    }
    if ys.is_empty() {
        return Err(Error::Ingest { row: 1, message: format!("{}: no observations", path.display()) });
    }
    Ok(observations(&ys))
}

fn wrap_open(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Csv(csv::Error::from(std::io::Error::other(format!("{other:?}")))),
    }
}

/// Log returns scaled to unit population variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    pub dates: Vec<String>,
    pub values: Vec<f64>,
}

impl ReturnSeries {
    pub fn observations(&self) -> Vec<Observation> {
        observations(&self.values)
    }
}

/// Which kind of series the second CSV column holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SeriesKind {
    Prices,
    Returns,
}

fn series_kind(header: &str) -> Option<SeriesKind> {
    match header.trim().to_ascii_lowercase().as_str() {
        "price" | "close" | "adj_close" | "adj close" => Some(SeriesKind::Prices),
        "log_return" | "return" | "returns" | "r" => Some(SeriesKind::Returns),
        _ => None,
    }
}

/// Reads `(date, price)` or `(date, log_return)` rows and returns log returns
/// divided by their population standard deviation. Dates are kept as given.
pub fn ingest_returns(path: &Path) -> Result<ReturnSeries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_returns_str(&text)
}

/// [`ingest_returns`] on in-memory CSV text. Row numbers in errors count
/// file lines from 1 (the header).
pub fn ingest_returns_str(text: &str) -> Result<ReturnSeries> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| Error::Ingest { row: 1, message: e.to_string() })?.clone();
    if headers.len() < 2 {
        return Err(Error::Ingest { row: 1, message: "expected two columns: date and price or log_return".into() });
    }
    let kind = series_kind(&headers[1]).ok_or_else(|| Error::Ingest {
        row: 1,
        message: format!("second column `{}` is neither a price nor a log_return column", &headers[1]),
    })?;
    let mut dates = Vec::new();
    let mut raw = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Ingest {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let value: f64 = rec
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Ingest { row, message: format!("unparseable value `{}`", rec.get(1).unwrap_or("")) })?;
        if !value.is_finite() {
            return Err(Error::Ingest { row, message: "value is not finite".into() });
        }
        if kind == SeriesKind::Prices && value <= 0.0 {
            return Err(Error::Ingest { row, message: format!("price must be positive, got {value}") });
        }
        dates.push(rec.get(0).unwrap_or("").to_string());
        raw.push(value);
    }
    let (dates, returns) = match kind {
        SeriesKind::Prices => {
            if raw.len() < 3 {
                return Err(Error::Ingest { row: raw.len() + 1, message: "need at least 3 prices".into() });
            }
            let returns = raw.windows(2).map(|p| (p[1] / p[0]).ln()).collect();
            (dates[1..].to_vec(), returns)
        }
        SeriesKind::Returns => {
            if raw.len() < 2 {
                return Err(Error::Ingest { row: raw.len() + 1, message: "need at least 2 returns".into() });
            }
            (dates, raw)
        }
    };
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let sd = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd.is_nan() || sd <= 0.0 {
        return Err(Error::Ingest { row: 0, message: "returns have zero variance".into() });
    }
    Ok(ReturnSeries { dates, values: returns.iter().map(|r| r / sd).collect() })
}
