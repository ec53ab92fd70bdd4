//! Fixed-point load flow.
//!
//! For voltages `v` and injections `s = {s_wye, s_delta}` the map is
//!
//! ```text
//! f_X(v, s) = X ( conj(s_wye) / conj(v) + H^T ( conj(s_delta) / (H conj(v)) ) )
//! ```
//!
//! with elementwise division, and the load flow is solved by iterating
//! `v <- w + f_X(v, s)`. Injections follow the source convention: generation
//! is positive, loads are negative.

use nalgebra::DVectorView;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::network::DerivedOperator;
use crate::{CMatrix, CVector};

/// Denominator magnitudes below this are treated as a collapsed voltage.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Per-bus wye and delta power sources for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub s_wye: CVector,
    /// Ordered `(ab, bc, ca)` within each bus.
    pub s_delta: CVector,
}

impl Injection {
    pub fn new(s_wye: CVector, s_delta: CVector) -> Result<Self> {
        if s_wye.len() != s_delta.len() {
            return Err(Error::validation(
                "s_delta",
                format!(
                    "length {} differs from s_wye length {}",
                    s_delta.len(),
                    s_wye.len()
                ),
            ));
        }
        if s_wye.is_empty() || !s_wye.len().is_multiple_of(3) {
            return Err(Error::validation(
                "s_wye",
                "length must be a positive multiple of 3",
            ));
        }
        if s_wye.iter().chain(s_delta.iter()).any(|z| !z.is_finite()) {
            return Err(Error::validation("s_wye", "non-finite power entry"));
        }
        Ok(Self { s_wye, s_delta })
    }

    pub fn zeros(n_buses: usize) -> Self {
        Self {
            s_wye: CVector::zeros(3 * n_buses),
            s_delta: CVector::zeros(3 * n_buses),
        }
    }

    /// The same wye source on every bus and phase, no delta sources.
    pub fn uniform_wye(n_buses: usize, s: Complex64) -> Self {
        Self {
            s_wye: CVector::from_element(3 * n_buses, s),
            s_delta: CVector::zeros(3 * n_buses),
        }
    }

    pub fn n_buses(&self) -> usize {
        self.s_wye.len() / 3
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            s_wye: &self.s_wye * Complex64::new(factor, 0.0),
            s_delta: &self.s_delta * Complex64::new(factor, 0.0),
        }
    }
}

/// Phase-to-ground voltages at the PQ buses.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageProfile {
    pub v: CVector,
}

impl VoltageProfile {
    pub fn new(v: CVector) -> Self {
        Self { v }
    }

    pub fn n_buses(&self) -> usize {
        self.v.len() / 3
    }

    /// True when every magnitude lies in `[lo, hi]`.
    pub fn within_band(&self, lo: f64, hi: f64) -> bool {
        self.v.iter().all(|z| (lo..=hi).contains(&z.norm()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub profile: VoltageProfile,
    pub iterations: usize,
    /// Infinity norm of the last step `v^{k+1} - v^k`.
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 50,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::Config(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// `H x` applied blockwise.
pub fn apply_h(x: DVectorView<'_, Complex64>) -> CVector {
    CVector::from_fn(x.len(), |i, _| {
        let o = i - i % 3;
        let p = i % 3;
        x[o + p] - x[o + (p + 1) % 3]
    })
}

/// `H^T y` applied blockwise.
pub fn apply_h_transpose(y: DVectorView<'_, Complex64>) -> CVector {
    CVector::from_fn(y.len(), |i, _| {
        let o = i - i % 3;
        let p = i % 3;
        y[o + p] - y[o + (p + 2) % 3]
    })
}

/// Current-like term `conj(s_wye)/conj(v) + H^T (conj(s_delta) / (H conj(v)))`.
///
/// Terms with zero power contribute nothing and their denominators are not
/// checked.
pub fn bracket(v: &CVector, s: &Injection) -> Result<CVector> {
    let u = v.map(|z| z.conj());
    let hu = apply_h(u.as_view());
    let mut delta = CVector::zeros(v.len());
    for i in 0..v.len() {
        delta[i] = checked_ratio(s.s_delta[i].conj(), hu[i], i)?;
    }
    let mut out = apply_h_transpose(delta.as_view());
    for i in 0..v.len() {
        out[i] += checked_ratio(s.s_wye[i].conj(), u[i], i)?;
    }
    Ok(out)
}

fn checked_ratio(num: Complex64, den: Complex64, index: usize) -> Result<Complex64> {
    if num == ZERO {
        return Ok(ZERO);
    }
    let magnitude = den.norm();
    if magnitude.is_nan() || magnitude < DEGENERATE_DENOMINATOR {
        return Err(Error::DegenerateVoltage { index, magnitude });
    }
    Ok(num / den)
}

/// `f_X(v, s)` for an arbitrary operator matrix.
pub fn fixed_point_map_with(x: &CMatrix, v: &CVector, s: &Injection) -> Result<CVector> {
    check_dims(x, v, s)?;
    Ok(x * bracket(v, s)?)
}

pub fn fixed_point_map(op: &DerivedOperator, v: &VoltageProfile, s: &Injection) -> Result<CVector> {
    fixed_point_map_with(&op.x, &v.v, s)
}

fn check_dims(x: &CMatrix, v: &CVector, s: &Injection) -> Result<()> {
    let n = v.len();
    if x.shape() != (n, n) {
        return Err(Error::validation(
            "x",
            format!(
                "operator is {}x{}, voltage has {n} entries",
                x.nrows(),
                x.ncols()
            ),
        ));
    }
    if s.s_wye.len() != n || s.s_delta.len() != n {
        return Err(Error::validation(
            "injection",
            format!("injection has {} entries, voltage has {n}", s.s_wye.len()),
        ));
    }
    Ok(())
}

/// Iterates `v <- w + f_X(v, s)` from `v_init`, calling `on_step` with every
/// new iterate.
pub fn iterate_fixed_point(
    x: &CMatrix,
    w: &CVector,
    s: &Injection,
    v_init: &CVector,
    options: &SolverOptions,
    mut on_step: impl FnMut(&CVector),
) -> Result<SolveReport> {
    options.validate()?;
    check_dims(x, v_init, s)?;
    if w.len() != v_init.len() {
        return Err(Error::validation("w", "length differs from voltage"));
    }
    let mut v = v_init.clone();
    let mut next = CVector::zeros(v.len());
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        let b = bracket(&v, s)?;
        next.copy_from(w);
        next.gemv(Complex64::new(1.0, 0.0), x, &b, Complex64::new(1.0, 0.0));
        residual = (&next - &v).iter().map(|z| z.norm()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        iterations += 1;
        on_step(&v);
        if !residual.is_finite() || residual < options.tolerance {
            break;
        }
    }
    Ok(SolveReport {
        profile: VoltageProfile::new(v),
        iterations,
        residual,
        converged: residual < options.tolerance,
    })
}

pub fn solve_fixed_point(
    op: &DerivedOperator,
    s: &Injection,
    v_init: &VoltageProfile,
    options: &SolverOptions,
) -> Result<SolveReport> {
    iterate_fixed_point(&op.x, &op.w, s, &v_init.v, options, |_| {})
}

/// Solve starting from the no-load voltage `w`.
pub fn solve_flat_start(
    op: &DerivedOperator,
    s: &Injection,
    options: &SolverOptions,
) -> Result<SolveReport> {
    iterate_fixed_point(&op.x, &op.w, s, &op.w, options, |_| {})
}

/// `|| v - w - f_X(v, s) ||_inf`.
pub fn fixed_point_residual(x: &CMatrix, w: &CVector, v: &CVector, s: &Injection) -> Result<f64> {
    let f = fixed_point_map_with(x, v, s)?;
    Ok((v - w - f).iter().map(|z| z.norm()).fold(0.0, f64::max))
}
