//! Experiment metrics: a JSON-lines record type, error-rate reduction, and
//! Spearman rank correlation with a Student-t significance test.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("paired samples differ in length: {xs} vs {ys}")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("need at least 3 paired samples, got {0}")]
    TooFewSamples(usize),
    #[error("rank correlation is undefined when one side is constant")]
    ZeroVariance,
    #[error("samples must be finite")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One evaluation outcome, serialized as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub split: String,
    pub token_error_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate_reduction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_quality: Option<f64>,
    /// Informational only; files meant to be byte-reproducible leave it
    /// out, because it differs between otherwise identical runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
    pub seed: u64,
}

impl MetricsRecord {
    /// Equality for reproducibility checks; wall-clock time is the one
    /// field allowed to differ between identical runs.
    pub fn same_outcome(&self, other: &MetricsRecord) -> bool {
        let strip = |r: &MetricsRecord| MetricsRecord {
            wall_clock_seconds: None,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

pub fn write_records(path: &Path, records: &[MetricsRecord]) -> Result<(), MetricsError> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Appends records to a metrics file, creating it when missing.
pub fn append_records(path: &Path, records: &[MetricsRecord]) -> Result<(), MetricsError> {
    use std::io::Write;
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for record in records {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    fs::read_to_string(path)?
        .lines()
        .filter(|line| !line.is_empty())
        .map(|line| Ok(serde_json::from_str(line)?))
        .collect()
}

/// Relative improvement of `adapted` over `baseline`; `None` when the
/// baseline is already error-free.
pub fn error_rate_reduction(baseline: f64, adapted: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (baseline - adapted) / baseline)
}

/// Ranks with ties sharing their average position, 1-based.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    pub t_statistic: f64,
    /// Two-sided, from a t distribution with `n - 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

/// Spearman rank correlation: the Pearson correlation of average ranks,
/// which stays exact under ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Spearman, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    let n = xs.len();
    if n < 3 {
        return Err(MetricsError::TooFewSamples(n));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }

    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        var_x += (a - mean).powi(2);
        var_y += (b - mean).powi(2);
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    let rho = (cov / (var_x * var_y).sqrt()).clamp(-1.0, 1.0);

    let df = (n - 2) as f64;
    let (t_statistic, p_value) = if 1.0 - rho * rho <= f64::EPSILON {
        (f64::INFINITY * rho.signum(), 0.0)
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (t, 2.0 * dist.cdf(-t.abs()))
    };
    Ok(Spearman {
        rho,
        t_statistic,
        p_value,
        n,
    })
}
