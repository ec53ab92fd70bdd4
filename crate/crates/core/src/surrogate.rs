//! Learnable fixed-point surrogate `v = w_hat + f_{X_hat}(v, s)`.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cio::{self, Pair};
use crate::error::{Error, Result};
use crate::loadflow::{self, Injection, SolverOptions};
use crate::network::DerivedOperator;
use crate::{CMatrix, CVector};

/// Default value of every `X_hat` entry at initialization.
pub const DEFAULT_INIT_X: Complex64 = Complex64::new(0.1, 0.1);

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateParams {
    pub x_hat: CMatrix,
    pub w_hat: CVector,
}

impl SurrogateParams {
    pub fn new(x_hat: CMatrix, w_hat: CVector) -> Result<Self> {
        let n = w_hat.len();
        if n == 0 || !n.is_multiple_of(3) {
            return Err(Error::validation(
                "w_hat",
                "length must be a positive multiple of 3",
            ));
        }
        if x_hat.shape() != (n, n) {
            return Err(Error::validation(
                "x_hat",
                format!(
                    "expected {n}x{n}, found {}x{}",
                    x_hat.nrows(),
                    x_hat.ncols()
                ),
            ));
        }
        let params = Self { x_hat, w_hat };
        if !params.is_finite() {
            return Err(Error::validation("x_hat", "non-finite parameter"));
        }
        Ok(params)
    }

    /// The surrogate that reproduces the feeder exactly.
    pub fn from_operator(op: &DerivedOperator) -> Self {
        Self {
            x_hat: op.x.clone(),
            w_hat: op.w.clone(),
        }
    }

    pub fn n_buses(&self) -> usize {
        self.w_hat.len() / 3
    }

    pub fn is_finite(&self) -> bool {
        self.x_hat
            .iter()
            .chain(self.w_hat.iter())
            .all(|z| z.is_finite())
    }

    /// Largest entrywise change between two parameter sets.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let dx = (&self.x_hat - &other.x_hat)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        let dw = (&self.w_hat - &other.w_hat)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        dx.max(dw)
    }
}

/// `w_hat` is the slack voltage repeated at every bus; every `X_hat` entry
/// equals `init_value`.
pub fn init_params(
    feeder_slack: [Complex64; 3],
    n_buses: usize,
    init_value: Complex64,
) -> SurrogateParams {
    let n = 3 * n_buses;
    SurrogateParams {
        x_hat: CMatrix::from_element(n, n, init_value),
        w_hat: CVector::from_fn(n, |i, _| feeder_slack[i % 3]),
    }
}

/// The recorded iterates `v^0 = w_hat, v^1, ..., v^T` of one prediction.
#[derive(Debug, Clone)]
pub struct ForwardTape<'a> {
    pub params: &'a SurrogateParams,
    pub injection: &'a Injection,
    pub iterates: Vec<CVector>,
    pub converged: bool,
}

impl ForwardTape<'_> {
    pub fn prediction(&self) -> &CVector {
        self.iterates
            .last()
            .expect("tape always holds the initial iterate")
    }

    pub fn steps(&self) -> usize {
        self.iterates.len() - 1
    }

    /// Largest `|v^{k+1} - w_hat - f(v^k)|` over the recorded steps.
    pub fn max_step_defect(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for pair in self.iterates.windows(2) {
            let f = loadflow::fixed_point_map_with(&self.params.x_hat, &pair[0], self.injection)?;
            let defect = (&pair[1] - &self.params.w_hat - f)
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            worst = worst.max(defect);
        }
        Ok(worst)
    }
}

/// Iterates the surrogate from `w_hat` until the step falls below the
/// tolerance or the iteration cap is hit.
pub fn predict<'a>(
    params: &'a SurrogateParams,
    s: &'a Injection,
    options: &SolverOptions,
) -> Result<ForwardTape<'a>> {
    let mut iterates = vec![params.w_hat.clone()];
    let report = loadflow::iterate_fixed_point(
        &params.x_hat,
        &params.w_hat,
        s,
        &params.w_hat,
        options,
        |v| iterates.push(v.clone()),
    )?;
    Ok(ForwardTape {
        params,
        injection: s,
        iterates,
        converged: report.converged,
    })
}

/// Exactly `steps` iterations with no stopping rule.
pub fn predict_unrolled<'a>(
    params: &'a SurrogateParams,
    s: &'a Injection,
    steps: usize,
) -> Result<ForwardTape<'a>> {
    if steps == 0 {
        return Err(Error::Config("unroll depth must be at least 1".into()));
    }
    let mut iterates = Vec::with_capacity(steps + 1);
    iterates.push(params.w_hat.clone());
    for _ in 0..steps {
        let prev = iterates.last().unwrap();
        let next = &params.w_hat + loadflow::fixed_point_map_with(&params.x_hat, prev, s)?;
        iterates.push(next);
    }
    Ok(ForwardTape {
        params,
        injection: s,
        iterates,
        converged: false,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    n_buses: usize,
    w_hat: Vec<Pair>,
    x_hat: Vec<Vec<Pair>>,
}

pub fn params_to_json(params: &SurrogateParams) -> Result<String> {
    Ok(serde_json::to_string(&CheckpointFile {
        n_buses: params.n_buses(),
        w_hat: cio::vector_to_pairs(&params.w_hat),
        x_hat: cio::matrix_to_pairs(&params.x_hat),
    })?)
}

pub fn params_from_json(text: &str) -> Result<SurrogateParams> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    let n = 3 * file.n_buses;
    if n == 0 {
        return Err(Error::validation("n_buses", "must be at least 1"));
    }
    SurrogateParams::new(
        cio::matrix_from_pairs("x_hat", &file.x_hat, n, n)?,
        cio::vector_from_pairs("w_hat", &file.w_hat, n)?,
    )
}

pub fn save_params(params: &SurrogateParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, params_to_json(params)?)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<SurrogateParams> {
    params_from_json(&fs::read_to_string(path)?)
}
