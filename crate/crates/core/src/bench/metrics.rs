//! Aggregated evaluation metrics and their CSV form.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::envs::throughput;
use crate::error::{Error, Result};
use crate::executors::{Method, TrialResult};

/// Normal quantile for a two-sided 95% interval.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if p == 1.0 { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// One (method, d, seed) evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub d: usize,
    pub s: usize,
    pub seed: u64,
    pub solve_rate: f64,
    pub throughput_256: f64,
    pub boundary_jerk: f64,
    pub within_jerk: f64,
    pub mean_unmask_tokens: f64,
    pub mean_rounds_per_inference: f64,
    pub mean_cost_ratio: f64,
    pub trials: usize,
    pub solve_ci_low: f64,
    pub solve_ci_high: f64,
}

pub const CSV_COLUMNS: [&str; 14] = [
    "method",
    "d",
    "s",
    "seed",
    "solve_rate",
    "throughput_256",
    "boundary_jerk",
    "within_jerk",
    "mean_unmask_tokens",
    "mean_rounds_per_inference",
    "mean_cost_ratio",
    "trials",
    "solve_ci_low",
    "solve_ci_high",
];

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricsRow {
    pub fn aggregate(method: Method, d: usize, s: usize, seed: u64, trials: &[TrialResult]) -> Self {
        let solved = trials.iter().filter(|t| t.solved()).count();
        let n = trials.len();
        let inferences: usize = trials.iter().map(|t| t.stats.inferences).sum();
        let per_inference = |total: f64| if inferences == 0 { 0.0 } else { total / inferences as f64 };
        let (lo, hi) = wilson_interval(solved, n, Z95);
        MetricsRow {
            method,
            d,
            s,
            seed,
            solve_rate: if n == 0 { 0.0 } else { solved as f64 / n as f64 },
            throughput_256: mean(trials.iter().map(|t| throughput(t.completed, t.steps))),
            boundary_jerk: mean(trials.iter().map(|t| t.boundary_jerk)),
            within_jerk: mean(trials.iter().map(|t| t.within_jerk)),
            mean_unmask_tokens: per_inference(trials.iter().map(|t| t.stats.newly_unmasked as f64).sum()),
            mean_rounds_per_inference: per_inference(trials.iter().map(|t| t.stats.rounds as f64).sum()),
            mean_cost_ratio: per_inference(trials.iter().map(|t| t.stats.cost_ratio).sum()),
            trials: n,
            solve_ci_low: lo,
            solve_ci_high: hi,
        }
    }

    fn csv_record(&self) -> Vec<String> {
        let f = |x: f64| format!("{x:.6}");
        vec![
            self.method.name().to_string(),
            self.d.to_string(),
            self.s.to_string(),
            self.seed.to_string(),
            f(self.solve_rate),
            f(self.throughput_256),
            f(self.boundary_jerk),
            f(self.within_jerk),
            f(self.mean_unmask_tokens),
            f(self.mean_rounds_per_inference),
            f(self.mean_cost_ratio),
            self.trials.to_string(),
            f(self.solve_ci_low),
            f(self.solve_ci_high),
        ]
    }
}

/// Writes `header` (already `# `-prefixed) followed by the CSV table.
pub fn write_metrics_csv(out: &mut impl Write, header: &str, rows: &[MetricsRow]) -> Result<()> {
    out.write_all(header.as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for r in rows {
        w.write_record(r.csv_record()).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_metrics_csv`], skipping `#` lines.
pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Format(format!("unexpected metrics columns: {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
}
