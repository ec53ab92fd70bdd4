//! Three-phase network representation.
//!
//! A feeder is stored through the two admittance blocks the fixed-point load
//! flow needs: `Y_LL` (PQ buses among themselves) and `Y_L0` (PQ buses to the
//! slack bus). PQ bus `i` (1-indexed) occupies rows `3(i-1)..3i`, phases
//! ordered `(a, b, c)`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cio::{self, Pair};
use crate::error::{Error, Result};
use crate::loadflow::{self, Injection, SolverOptions};
use crate::{CMatrix, CVector};

/// Smallest reciprocal 1-norm condition number accepted for `Y_LL`.
pub const MIN_RCOND: f64 = 1e-13;

const SLACK_MAGNITUDE_RANGE: (f64, f64) = (0.9, 1.1);

/// Balanced positive-sequence slack voltage at 1.0 p.u.
pub fn balanced_slack() -> [Complex64; 3] {
    [
        Complex64::new(1.0, 0.0),
        Complex64::from_polar(1.0, -2.0 * PI / 3.0),
        Complex64::from_polar(1.0, 2.0 * PI / 3.0),
    ]
}

/// Partitioned admittance data of an unbalanced three-phase feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    name: String,
    n_buses: usize,
    y_ll: CMatrix,
    y_l0: CMatrix,
    v_slack: [Complex64; 3],
}

impl FeederModel {
    /// Validates dimensions, slack magnitudes and invertibility of `Y_LL`.
    pub fn new(
        name: impl Into<String>,
        n_buses: usize,
        y_ll: CMatrix,
        y_l0: CMatrix,
        v_slack: [Complex64; 3],
    ) -> Result<Self> {
        if n_buses == 0 {
            return Err(Error::validation("n_buses", "must be at least 1"));
        }
        let n = 3 * n_buses;
        if y_ll.shape() != (n, n) {
            return Err(Error::validation(
                "y_ll",
                format!("expected {n}x{n}, found {}x{}", y_ll.nrows(), y_ll.ncols()),
            ));
        }
        if y_l0.shape() != (n, 3) {
            return Err(Error::validation(
                "y_l0",
                format!("expected {n}x3, found {}x{}", y_l0.nrows(), y_l0.ncols()),
            ));
        }
        if y_ll.iter().chain(y_l0.iter()).any(|z| !z.is_finite()) {
            return Err(Error::validation("y_ll", "non-finite admittance entry"));
        }
        let (lo, hi) = SLACK_MAGNITUDE_RANGE;
        for (phase, v) in v_slack.iter().enumerate() {
            let mag = v.norm();
            if !(lo..=hi).contains(&mag) {
                return Err(Error::validation(
                    "v_slack",
                    format!("phase {phase} magnitude {mag} outside [{lo}, {hi}] p.u."),
                ));
            }
        }
        invert_checked(&y_ll)?;
        Ok(Self {
            name: name.into(),
            n_buses,
            y_ll,
            y_l0,
            v_slack,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn y_ll(&self) -> &CMatrix {
        &self.y_ll
    }

    pub fn y_l0(&self) -> &CMatrix {
        &self.y_l0
    }

    pub fn v_slack(&self) -> [Complex64; 3] {
        self.v_slack
    }

    /// 1-norm condition number of `Y_LL`.
    pub fn condition_estimate(&self) -> f64 {
        match invert_checked(&self.y_ll) {
            Ok((_, rcond)) => 1.0 / rcond,
            Err(_) => f64::INFINITY,
        }
    }
}

/// `X = Y_LL^-1`, the no-load voltage `w = -X Y_L0 v_0`, and the delta
/// transformation `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedOperator {
    pub x: CMatrix,
    pub w: CVector,
    pub h: CMatrix,
}

impl DerivedOperator {
    pub fn n_buses(&self) -> usize {
        self.w.len() / 3
    }
}

const H_BLOCK: [[f64; 3]; 3] = [[1.0, -1.0, 0.0], [0.0, 1.0, -1.0], [-1.0, 0.0, 1.0]];

/// Block-diagonal delta transformation with `n_buses` copies of
/// `[1 -1 0; 0 1 -1; -1 0 1]`.
pub fn build_h(n_buses: usize) -> CMatrix {
    let n = 3 * n_buses;
    let mut h = CMatrix::zeros(n, n);
    for bus in 0..n_buses {
        let o = 3 * bus;
        for (r, row) in H_BLOCK.iter().enumerate() {
            for (c, &val) in row.iter().enumerate() {
                h[(o + r, o + c)] = Complex64::new(val, 0.0);
            }
        }
    }
    h
}

pub fn derive_operators(feeder: &FeederModel) -> Result<DerivedOperator> {
    let (x, _) = invert_checked(&feeder.y_ll)?;
    let v0 = CVector::from_column_slice(&feeder.v_slack);
    let w = -(&x * (&feeder.y_l0 * v0));
    Ok(DerivedOperator {
        x,
        w,
        h: build_h(feeder.n_buses),
    })
}

/// LU inverse with partial pivoting plus a reciprocal condition estimate.
fn invert_checked(m: &CMatrix) -> Result<(CMatrix, f64)> {
    let inv = m
        .clone()
        .lu()
        .try_inverse()
        .ok_or(Error::SingularMatrix { rcond: 0.0 })?;
    let rcond = 1.0 / (norm_1(m) * norm_1(&inv));
    if !rcond.is_finite() || rcond < MIN_RCOND {
        return Err(Error::SingularMatrix {
            rcond: if rcond.is_finite() { rcond } else { 0.0 },
        });
    }
    Ok((inv, rcond))
}

fn norm_1(m: &CMatrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Series element between two buses; bus 0 is the slack bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub admittance: Matrix3<Complex64>,
}

/// Stamps `lines` into the full `3(N+1)` bus admittance matrix and keeps the
/// PQ partition.
pub fn assemble_feeder(
    name: impl Into<String>,
    n_buses: usize,
    lines: &[Line],
    v_slack: [Complex64; 3],
) -> Result<FeederModel> {
    let total = 3 * (n_buses + 1);
    let mut y = CMatrix::zeros(total, total);
    for (k, line) in lines.iter().enumerate() {
        if line.from > n_buses || line.to > n_buses || line.from == line.to {
            return Err(Error::validation(
                "lines",
                format!(
                    "line {k} connects invalid buses {} -> {}",
                    line.from, line.to
                ),
            ));
        }
        let (i, j) = (3 * line.from, 3 * line.to);
        for r in 0..3 {
            for c in 0..3 {
                let yl = line.admittance[(r, c)];
                y[(i + r, i + c)] += yl;
                y[(j + r, j + c)] += yl;
                y[(i + r, j + c)] -= yl;
                y[(j + r, i + c)] -= yl;
            }
        }
    }
    let n = 3 * n_buses;
    let y_ll = y.view((3, 3), (n, n)).into_owned();
    let y_l0 = y.view((3, 0), (n, 3)).into_owned();
    FeederModel::new(name, n_buses, y_ll, y_l0, v_slack)
}

/// Ranges used by [`generate_synthetic_feeder`].
pub mod synthetic {
    /// Self-admittance magnitude of a line phase, p.u.
    pub const SELF_MAGNITUDE: (f64, f64) = (5.0, 50.0);
    /// Mutual coupling as a fraction of the smaller self term.
    pub const MUTUAL_FRACTION: (f64, f64) = (0.1, 0.3);
    /// Impedance angle of a line (radians); admittance angle is its negative.
    pub const IMPEDANCE_ANGLE: (f64, f64) = (
        45.0 * std::f64::consts::PI / 180.0,
        75.0 * std::f64::consts::PI / 180.0,
    );
    pub const MAX_RETRIES: usize = 10;
    /// Per-phase load (as a negative injection) used for the contraction check.
    pub const CHECK_LOAD: (f64, f64) = (0.015, 0.0075);
    pub const CHECK_MIN_VOLTAGE: f64 = 0.8;
}

/// Random radial feeder with `n_buses` PQ buses, deterministic in `seed`.
pub fn generate_synthetic_feeder(n_buses: usize, seed: u64) -> Result<FeederModel> {
    if n_buses == 0 {
        return Err(Error::validation("n_buses", "must be at least 1"));
    }
    let mut last = String::new();
    for attempt in 0..=synthetic::MAX_RETRIES {
        let attempt_seed = seed.wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let lines = random_radial_lines(n_buses, attempt_seed);
        let name = format!("synthetic-{n_buses}-{seed}");
        match assemble_feeder(name, n_buses, &lines, balanced_slack())
            .and_then(|f| check_nominal_contraction(&f).map(|_| f))
        {
            Ok(feeder) => return Ok(feeder),
            Err(err) => last = err.to_string(),
        }
    }
    Err(Error::GenerationFailed {
        attempts: synthetic::MAX_RETRIES + 1,
        reason: last,
    })
}

/// Random recursive tree: bus `i` attaches to a uniformly chosen earlier bus.
pub fn random_radial_lines(n_buses: usize, seed: u64) -> Vec<Line> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..=n_buses)
        .map(|to| {
            let from = rng.gen_range(0..to);
            Line {
                from,
                to,
                admittance: random_line_admittance(&mut rng),
            }
        })
        .collect()
}

fn random_line_admittance(rng: &mut impl Rng) -> Matrix3<Complex64> {
    let (smin, smax) = synthetic::SELF_MAGNITUDE;
    let (mmin, mmax) = synthetic::MUTUAL_FRACTION;
    let (amin, amax) = synthetic::IMPEDANCE_ANGLE;
    let angle = rng.gen_range(amin..amax);
    let rot = Complex64::from_polar(1.0, -angle);
    let mags: [f64; 3] = std::array::from_fn(|_| rng.gen_range(smin..=smax));
    let mut y = Matrix3::from_fn(|r, c| {
        if r == c {
            rot * mags[r]
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    for (r, c) in [(0, 1), (1, 2), (0, 2)] {
        let frac = rng.gen_range(mmin..=mmax);
        let mutual = -rot * (frac * mags[r].min(mags[c]));
        y[(r, c)] = mutual;
        y[(c, r)] = mutual;
    }
    y
}

/// Strict row dominance of a 3x3 primitive admittance block.
pub fn is_row_dominant(block: &Matrix3<Complex64>) -> bool {
    (0..3).all(|r| {
        let off: f64 = (0..3)
            .filter(|&c| c != r)
            .map(|c| block[(r, c)].norm())
            .sum();
        block[(r, r)].norm() > off
    })
}

fn check_nominal_contraction(feeder: &FeederModel) -> Result<()> {
    let op = derive_operators(feeder)?;
    let (p, q) = synthetic::CHECK_LOAD;
    let s = Injection::uniform_wye(feeder.n_buses, -Complex64::new(p, q));
    let report = loadflow::solve_flat_start(&op, &s, &SolverOptions::default())?;
    if !report.converged {
        return Err(Error::Validation {
            field: "feeder".into(),
            message: format!(
                "fixed-point iteration did not converge at nominal load (residual {:e})",
                report.residual
            ),
        });
    }
    let vmin = report
        .profile
        .v
        .iter()
        .map(|z| z.norm())
        .fold(f64::INFINITY, f64::min);
    if vmin < synthetic::CHECK_MIN_VOLTAGE {
        return Err(Error::validation(
            "feeder",
            format!(
                "nominal-load voltage {vmin:.3} p.u. below {}",
                synthetic::CHECK_MIN_VOLTAGE
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FeederFile {
    name: String,
    n_buses: usize,
    v_slack: Vec<Pair>,
    y_ll: Vec<Vec<Pair>>,
    y_l0: Vec<Vec<Pair>>,
    // Accepted for compatibility with full admittance exports; unused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_0l: Option<Vec<Vec<Pair>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_00: Option<Vec<Vec<Pair>>>,
}

pub fn feeder_to_json(feeder: &FeederModel) -> Result<String> {
    let file = FeederFile {
        name: feeder.name.clone(),
        n_buses: feeder.n_buses,
        v_slack: feeder.v_slack.iter().copied().map(cio::to_pair).collect(),
        y_ll: cio::matrix_to_pairs(&feeder.y_ll),
        y_l0: cio::matrix_to_pairs(&feeder.y_l0),
        y_0l: None,
        y_00: None,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn feeder_from_json(text: &str) -> Result<FeederModel> {
    let file: FeederFile = serde_json::from_str(text)?;
    if file.n_buses == 0 {
        return Err(Error::validation("n_buses", "must be at least 1"));
    }
    let n = 3 * file.n_buses;
    let v0 = cio::vector_from_pairs("v_slack", &file.v_slack, 3)?;
    let y_ll = cio::matrix_from_pairs("y_ll", &file.y_ll, n, n)?;
    let y_l0 = cio::matrix_from_pairs("y_l0", &file.y_l0, n, 3)?;
    FeederModel::new(file.name, file.n_buses, y_ll, y_l0, [v0[0], v0[1], v0[2]])
}

pub fn save_feeder(feeder: &FeederModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, feeder_to_json(feeder)?)?;
    Ok(())
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel> {
    feeder_from_json(&fs::read_to_string(path)?)
}
