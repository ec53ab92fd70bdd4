//! Test-set metrics: voltage magnitude and angle RMSE, per-entry error
//! distributions, and prediction timing.

use std::f64::consts::PI;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::loadflow::SolverOptions;
use crate::surrogate::{predict, SurrogateParams};
use crate::wirtinger::mean_square;

pub const DEFAULT_BUCKETS: usize = 16;

/// Bucketed counts with `counts.len() + 1` edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub log_scale: bool,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Histogram of `|e|`. Values below the first edge land in the first bucket
/// and values above the last edge in the last one, so every error is counted
/// exactly once. On a log scale the edges span whole decades around the
/// positive errors.
pub fn error_histogram(errors: &[f64], n_buckets: usize, log_scale: bool) -> Histogram {
    let n_buckets = n_buckets.max(1);
    let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    let max = abs.iter().copied().fold(0.0f64, f64::max);
    let edges: Vec<f64> = if log_scale {
        let min_pos = abs
            .iter()
            .copied()
            .filter(|&e| e > 0.0)
            .fold(f64::INFINITY, f64::min);
        let (lo, mut hi) = if min_pos.is_finite() {
            (min_pos.log10().floor(), max.log10().ceil())
        } else {
            (-16.0, 0.0)
        };
        if hi <= lo {
            hi = lo + 1.0;
        }
        (0..=n_buckets)
            .map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / n_buckets as f64))
            .collect()
    } else {
        let hi = if max > 0.0 { max } else { 1.0 };
        (0..=n_buckets)
            .map(|k| hi * k as f64 / n_buckets as f64)
            .collect()
    };
    let interior = &edges[1..n_buckets];
    let mut counts = vec![0usize; n_buckets];
    for e in abs {
        counts[interior.partition_point(|&edge| edge <= e)] += 1;
    }
    Histogram {
        edges,
        counts,
        log_scale,
    }
}

/// Wraps an angle difference into `(-pi, pi]`.
pub fn wrap_angle(d: f64) -> f64 {
    let r = d.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// RMSE of wrapped differences between paired angles.
pub fn angle_rmse(true_angles: &[f64], predicted_angles: &[f64]) -> f64 {
    assert_eq!(true_angles.len(), predicted_angles.len());
    if true_angles.is_empty() {
        return 0.0;
    }
    let sum: f64 = true_angles
        .iter()
        .zip(predicted_angles)
        .map(|(a, b)| wrap_angle(b - a).powi(2))
        .sum();
    (sum / true_angles.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `sqrt(mean (|v_hat| - |v|)^2)`, p.u.
    pub rmse_magnitude: f64,
    /// Wrapped angle RMSE, radians.
    pub rmse_angle: f64,
    /// Mean over samples of the complex-residual training loss.
    pub mean_complex_rmse: f64,
    /// Largest `| |v_hat| - |v| |` per voltage entry.
    pub per_bus_max_abs_error: Vec<f64>,
    pub histogram: Histogram,
    pub mean_predict_ms: f64,
    pub n_samples: usize,
    /// Samples whose prediction hit a degenerate voltage.
    pub n_excluded: usize,
    /// Predictions that stopped at the iteration cap.
    pub n_nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryError {
    pub sample: usize,
    /// 1-indexed PQ bus.
    pub bus: usize,
    pub phase: usize,
    pub v_magnitude: f64,
    pub v_hat_magnitude: f64,
    pub magnitude_error: f64,
    pub angle_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub entries: Vec<EntryError>,
}

pub fn evaluate(params: &SurrogateParams, test: &Dataset) -> Result<EvalReport> {
    Ok(evaluate_detailed(params, test, &SolverOptions::default(), DEFAULT_BUCKETS)?.report)
}

struct SampleOutcome {
    entries: Vec<EntryError>,
    complex_rmse: f64,
    converged: bool,
    millis: f64,
}

pub fn evaluate_detailed(
    params: &SurrogateParams,
    test: &Dataset,
    options: &SolverOptions,
    n_buckets: usize,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Config("test dataset is empty".into()));
    }
    let n = params.w_hat.len();
    if test.n_buses() != params.n_buses() {
        return Err(Error::validation(
            "test",
            format!(
                "dataset has {} buses, surrogate has {}",
                test.n_buses(),
                params.n_buses()
            ),
        ));
    }

    let outcomes: Vec<Result<Option<SampleOutcome>>> = test
        .samples
        .par_iter()
        .enumerate()
        .map(|(k, sample)| {
            let started = Instant::now();
            let tape = match predict(params, &sample.injection, options) {
                Ok(tape) => tape,
                Err(Error::DegenerateVoltage { .. }) => return Ok(None),
                Err(other) => return Err(other),
            };
            let millis = started.elapsed().as_secs_f64() * 1e3;
            let v_hat = tape.prediction();
            let v = &sample.voltage.v;
            let entries = (0..n)
                .map(|i| EntryError {
                    sample: k,
                    bus: i / 3 + 1,
                    phase: i % 3,
                    v_magnitude: v[i].norm(),
                    v_hat_magnitude: v_hat[i].norm(),
                    magnitude_error: v_hat[i].norm() - v[i].norm(),
                    angle_error: wrap_angle(v_hat[i].arg() - v[i].arg()),
                })
                .collect();
            Ok(Some(SampleOutcome {
                entries,
                complex_rmse: mean_square(v, v_hat).sqrt(),
                converged: tape.converged,
                millis,
            }))
        })
        .collect();

    let mut kept = Vec::with_capacity(outcomes.len());
    let mut excluded = 0;
    for outcome in outcomes {
        match outcome? {
            Some(o) => kept.push(o),
            None => excluded += 1,
        }
    }
    if kept.is_empty() {
        return Err(Error::Config(
            "every test sample produced a degenerate prediction".into(),
        ));
    }

    let entries: Vec<EntryError> = kept
        .iter()
        .flat_map(|o| o.entries.iter().cloned())
        .collect();
    let count = entries.len() as f64;
    let rmse_magnitude = (entries
        .iter()
        .map(|e| e.magnitude_error.powi(2))
        .sum::<f64>()
        / count)
        .sqrt();
    let rmse_angle = (entries.iter().map(|e| e.angle_error.powi(2)).sum::<f64>() / count).sqrt();
    let mut per_bus = vec![0.0f64; n];
    for e in &entries {
        let i = 3 * (e.bus - 1) + e.phase;
        per_bus[i] = per_bus[i].max(e.magnitude_error.abs());
    }
    let magnitude_errors: Vec<f64> = entries.iter().map(|e| e.magnitude_error).collect();
    let report = EvalReport {
        rmse_magnitude,
        rmse_angle,
        mean_complex_rmse: kept.iter().map(|o| o.complex_rmse).sum::<f64>() / kept.len() as f64,
        per_bus_max_abs_error: per_bus,
        histogram: error_histogram(&magnitude_errors, n_buckets, true),
        mean_predict_ms: kept.iter().map(|o| o.millis).sum::<f64>() / kept.len() as f64,
        n_samples: kept.len(),
        n_excluded: excluded,
        n_nonconverged: kept.iter().filter(|o| !o.converged).count(),
    };
    Ok(Evaluation { report, entries })
}
