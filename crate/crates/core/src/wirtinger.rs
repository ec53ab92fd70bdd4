//! RMSE loss and its Wirtinger gradient with respect to `conj(X_hat)`.
//!
//! The surrogate step `v' = w + X b(conj(v))` is not holomorphic in `v`, so
//! reverse accumulation carries the conjugate pair of adjoints
//! `lambda = dL/dv`, `mu = dL/d(conj v)`. Writing `J = db/du` at `u = conj(v)`
//! (a symmetric matrix),
//!
//! ```text
//! lambda_k = conj(J_k) X^H mu_{k+1}      mu_k = J_k X^T lambda_{k+1}
//! dL/dX        += lambda_{k+1} b_k^T
//! dL/dconj(X)  += mu_{k+1} b_k^H
//! ```
//!
//! For real `L`, `lambda = conj(mu)`, so the production pass runs the `mu`
//! chain alone and [`backward_paired`] keeps both for verification.
//! `w_hat` is held constant.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::loadflow::{
    self, apply_h, apply_h_transpose, Injection, VoltageProfile, DEGENERATE_DENOMINATOR,
};
use crate::surrogate::{predict_unrolled, ForwardTape, SurrogateParams};
use crate::{CMatrix, CVector};

/// Below this mean square the RMSE gradient is taken as zero.
pub const SQRT_ZERO_THRESHOLD: f64 = 1e-30;

const ONE: Complex64 = Complex64::new(1.0, 0.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub n_buses: usize,
}

/// Mean over all `3N` entries of `|v - v_hat|^2`.
pub fn mean_square(v_true: &CVector, v_pred: &CVector) -> f64 {
    assert_eq!(
        v_true.len(),
        v_pred.len(),
        "voltage vectors differ in length"
    );
    let sum: f64 = v_true
        .iter()
        .zip(v_pred.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    sum / v_true.len() as f64
}

pub fn loss(v_true: &VoltageProfile, v_pred: &CVector) -> LossValue {
    LossValue {
        value: mean_square(&v_true.v, v_pred).sqrt(),
        n_buses: v_true.n_buses(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WirtingerGradient {
    /// `dL/d conj(X_hat)`; the steepest-descent direction is its negative.
    pub d_x_conj: CMatrix,
}

impl WirtingerGradient {
    /// `dL/dX_hat`, equal to the conjugate for a real loss.
    pub fn d_x(&self) -> CMatrix {
        self.d_x_conj.map(|z| z.conj())
    }
}

/// Both halves of the conjugate gradient pair, each from its own adjoint chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedGradient {
    pub d_x: CMatrix,
    pub d_x_conj: CMatrix,
}

/// Seed `dL/d conj(v_hat^T)` for the RMSE loss; `None` inside the zero
/// region.
fn rmse_seed(prediction: &CVector, v_true: &CVector, zero_below: f64) -> Option<CVector> {
    let ms = mean_square(v_true, prediction);
    if ms < zero_below {
        return None;
    }
    let scale = 1.0 / (2.0 * v_true.len() as f64 * ms.sqrt());
    Some((prediction - v_true) * Complex64::new(scale, 0.0))
}

/// Seed for the pre-sqrt mean square.
fn mean_square_seed(prediction: &CVector, v_true: &CVector) -> CVector {
    (prediction - v_true) * Complex64::new(1.0 / v_true.len() as f64, 0.0)
}

pub fn backward(tape: &ForwardTape<'_>, v_true: &VoltageProfile) -> Result<WirtingerGradient> {
    backward_with_floor(tape, v_true, 0.0)
}

/// As [`backward`], but the gradient is zero whenever the RMSE is below
/// `min_rmse` (and always below `sqrt(SQRT_ZERO_THRESHOLD)`).
pub fn backward_with_floor(
    tape: &ForwardTape<'_>,
    v_true: &VoltageProfile,
    min_rmse: f64,
) -> Result<WirtingerGradient> {
    check_tape(tape, v_true)?;
    let n = v_true.v.len();
    let zero_below = SQRT_ZERO_THRESHOLD.max(min_rmse * min_rmse);
    match rmse_seed(tape.prediction(), &v_true.v, zero_below) {
        Some(seed) => backward_from_seed(tape, seed),
        None => Ok(WirtingerGradient {
            d_x_conj: CMatrix::zeros(n, n),
        }),
    }
}

/// Gradient of the mean square (the quantity under the RMSE square root).
pub fn backward_mean_square(
    tape: &ForwardTape<'_>,
    v_true: &VoltageProfile,
) -> Result<WirtingerGradient> {
    check_tape(tape, v_true)?;
    backward_from_seed(tape, mean_square_seed(tape.prediction(), &v_true.v))
}

fn check_tape(tape: &ForwardTape<'_>, v_true: &VoltageProfile) -> Result<()> {
    if tape.iterates.len() < 2 {
        return Err(Error::Config(
            "tape needs at least one recorded step".into(),
        ));
    }
    if v_true.v.len() != tape.prediction().len() {
        return Err(Error::validation(
            "v_true",
            "length differs from the prediction",
        ));
    }
    Ok(())
}

/// Reverse sweep over the tape given `mu_T = dL/d conj(v^T)`.
pub fn backward_from_seed(tape: &ForwardTape<'_>, seed: CVector) -> Result<WirtingerGradient> {
    let x = &tape.params.x_hat;
    let n = seed.len();
    let mut grad = CMatrix::zeros(n, n);
    let mut mu = seed;
    let mut scratch = CVector::zeros(n);
    for k in (0..tape.steps()).rev() {
        let v_k = &tape.iterates[k];
        let b = loadflow::bracket(v_k, tape.injection)?;
        grad.gerc(ONE, &mu, &b, ONE);
        if k > 0 {
            // X^T conj(mu), then J.
            let lambda = mu.map(|z| z.conj());
            scratch.gemv_tr(ONE, x, &lambda, ZERO);
            mu = apply_jacobian(v_k, tape.injection, &scratch)?;
        }
    }
    Ok(WirtingerGradient { d_x_conj: grad })
}

/// Runs the `lambda` and `mu` chains independently.
pub fn backward_paired(tape: &ForwardTape<'_>, v_true: &VoltageProfile) -> Result<PairedGradient> {
    check_tape(tape, v_true)?;
    let n = v_true.v.len();
    let Some(seed) = rmse_seed(tape.prediction(), &v_true.v, SQRT_ZERO_THRESHOLD) else {
        return Ok(PairedGradient {
            d_x: CMatrix::zeros(n, n),
            d_x_conj: CMatrix::zeros(n, n),
        });
    };
    let x = &tape.params.x_hat;
    let x_adj = x.adjoint();
    let mut lambda = seed.map(|z| z.conj());
    let mut mu = seed;
    let mut d_x = CMatrix::zeros(n, n);
    let mut d_x_conj = CMatrix::zeros(n, n);
    for k in (0..tape.steps()).rev() {
        let v_k = &tape.iterates[k];
        let b = loadflow::bracket(v_k, tape.injection)?;
        d_x += &lambda * b.transpose();
        d_x_conj += &mu * b.adjoint();
        if k > 0 {
            let next_mu = apply_jacobian(v_k, tape.injection, &(x.transpose() * &lambda))?;
            let t = &x_adj * &mu;
            let next_lambda =
                apply_jacobian(v_k, tape.injection, &t.map(|z| z.conj()))?.map(|z| z.conj());
            lambda = next_lambda;
            mu = next_mu;
        }
    }
    Ok(PairedGradient { d_x, d_x_conj })
}

/// `J z` with `J = d b / d u` at `u = conj(v)`:
/// `J = -diag(conj(s_wye) / u^2) - H^T diag(conj(s_delta) / (H u)^2) H`.
fn apply_jacobian(v: &CVector, s: &Injection, z: &CVector) -> Result<CVector> {
    let u = v.map(|c| c.conj());
    let hu = apply_h(u.as_view());
    let mut hz = apply_h(z.as_view());
    for i in 0..hz.len() {
        hz[i] *= squared_ratio(s.s_delta[i].conj(), hu[i], i)?;
    }
    let mut out = apply_h_transpose(hz.as_view());
    for i in 0..out.len() {
        out[i] += z[i] * squared_ratio(s.s_wye[i].conj(), u[i], i)?;
        out[i] = -out[i];
    }
    Ok(out)
}

fn squared_ratio(num: Complex64, den: Complex64, index: usize) -> Result<Complex64> {
    if num == ZERO {
        return Ok(ZERO);
    }
    let magnitude = den.norm();
    if magnitude.is_nan() || magnitude < DEGENERATE_DENOMINATOR {
        return Err(Error::DegenerateVoltage { index, magnitude });
    }
    Ok(num / (den * den))
}

/// Central differences over `Re` and `Im` of every `X_hat` entry at a fixed
/// unroll depth, recombined as `(dL/dRe + j dL/dIm) / 2`.
pub fn finite_diff_gradient(
    params: &SurrogateParams,
    s: &Injection,
    v_true: &VoltageProfile,
    unroll: usize,
    step: f64,
) -> Result<WirtingerGradient> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let n = params.w_hat.len();
    let mut d_x_conj = CMatrix::zeros(n, n);
    // Same subgradient convention as the reverse pass at the sqrt kink.
    let base = predict_unrolled(params, s, unroll)?;
    if mean_square(&v_true.v, base.prediction()) < SQRT_ZERO_THRESHOLD {
        return Ok(WirtingerGradient { d_x_conj });
    }
    let mut probe = params.clone();
    let eval = |p: &SurrogateParams| -> Result<f64> {
        let tape = predict_unrolled(p, s, unroll)?;
        Ok(loss(v_true, tape.prediction()).value)
    };
    for i in 0..n {
        for j in 0..n {
            let original = probe.x_hat[(i, j)];
            let mut partial = [0.0; 2];
            for (axis, dir) in [Complex64::new(step, 0.0), Complex64::new(0.0, step)]
                .into_iter()
                .enumerate()
            {
                probe.x_hat[(i, j)] = original + dir;
                let plus = eval(&probe)?;
                probe.x_hat[(i, j)] = original - dir;
                let minus = eval(&probe)?;
                partial[axis] = (plus - minus) / (2.0 * step);
            }
            probe.x_hat[(i, j)] = original;
            d_x_conj[(i, j)] = Complex64::new(0.5 * partial[0], 0.5 * partial[1]);
        }
    }
    Ok(WirtingerGradient { d_x_conj })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::balanced_slack;
    use crate::surrogate::{init_params, DEFAULT_INIT_X};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rand_c(rng: &mut impl Rng, scale: f64) -> Complex64 {
        c(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale))
    }

    /// Random near-nominal surrogate, injection, and target voltage.
    fn random_case(seed: u64, n_buses: usize) -> (SurrogateParams, Injection, VoltageProfile) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * n_buses;
        let slack = balanced_slack();
        let w = CVector::from_fn(n, |i, _| slack[i % 3] * (1.0 + rng.gen_range(-0.05..0.05)));
        let x = CMatrix::from_fn(n, n, |_, _| rand_c(&mut rng, 0.3));
        let s = Injection::new(
            CVector::from_fn(n, |_, _| rand_c(&mut rng, 0.05)),
            CVector::from_fn(n, |_, _| rand_c(&mut rng, 0.05)),
        )
        .unwrap();
        let v = VoltageProfile::new(CVector::from_fn(n, |i, _| {
            slack[i % 3] * 0.97 + rand_c(&mut rng, 0.02)
        }));
        (SurrogateParams::new(x, w).unwrap(), s, v)
    }

    fn assert_close(a: &CMatrix, b: &CMatrix, rel: f64, floor: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let err = (x - y).norm();
            let scale = x.norm().max(y.norm());
            assert!(err < floor || err < rel * scale, "{x} vs {y} (err {err:e})");
        }
    }

    #[test]
    fn loss_examples() {
        let v = VoltageProfile::new(CVector::from_column_slice(&[
            c(1.0, 0.0),
            c(0.5, 0.5),
            c(0.0, 1.0),
        ]));
        assert_eq!(loss(&v, &v.v).value, 0.0);
        let pred = &v.v - CVector::from_column_slice(&[c(3.0, 4.0), ZERO, ZERO]);
        let l = loss(&v, &pred);
        assert!((l.value - (25.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert_eq!(l.n_buses, 1);
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let (_, _, v) = random_case(1, 4);
        let (_, _, p) = random_case(2, 4);
        let mut acc = 0.0;
        for i in 0..12 {
            let dre = v.v[i].re - p.v[i].re;
            let dim = v.v[i].im - p.v[i].im;
            acc += dre * dre + dim * dim;
        }
        let reference = (acc / 12.0).sqrt();
        assert!((loss(&v, &p.v).value - reference).abs() < 1e-14);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let (params, s, _) = random_case(3, 2);
        let tape = predict_unrolled(&params, &s, 3).unwrap();
        let target = VoltageProfile::new(tape.prediction().clone());
        let g = backward(&tape, &target).unwrap();
        assert!(g.d_x_conj.iter().all(|z| *z == ZERO));
        let fd = finite_diff_gradient(&params, &s, &target, 3, 1e-6).unwrap();
        assert!(fd.d_x_conj.camax() < 1e-9);
    }

    #[test]
    fn single_bus_single_step_closed_form() {
        // v_hat = w + X conj(s)/conj(w); with e = v_hat - v and L = |e|/sqrt(3),
        // dL/dconj(X_pq) = e_p conj(b_q) / (6 L).
        let slack = balanced_slack();
        let mut params = init_params(slack, 1, DEFAULT_INIT_X);
        params.x_hat[(1, 2)] = c(-0.2, 0.05);
        let s = Injection::new(
            CVector::from_column_slice(&[c(-0.02, -0.01), c(-0.015, -0.005), c(0.01, 0.0)]),
            CVector::zeros(3),
        )
        .unwrap();
        let v = VoltageProfile::new(CVector::from_fn(3, |i, _| slack[i] * 0.98));
        let tape = predict_unrolled(&params, &s, 1).unwrap();
        let g = backward(&tape, &v).unwrap();

        let b: Vec<Complex64> = (0..3)
            .map(|q| s.s_wye[q].conj() / slack[q].conj())
            .collect();
        let e: Vec<Complex64> = (0..3)
            .map(|p| {
                slack[p]
                    + (0..3)
                        .map(|q| params.x_hat[(p, q)] * b[q])
                        .sum::<Complex64>()
                    - v.v[p]
            })
            .collect();
        let l = (e.iter().map(|z| z.norm_sqr()).sum::<f64>() / 3.0).sqrt();
        for (p, ep) in e.iter().enumerate() {
            for (q, bq) in b.iter().enumerate() {
                let expected = ep * bq.conj() / (6.0 * l);
                assert!((g.d_x_conj[(p, q)] - expected).norm() < 1e-10);
            }
        }
        let fd = finite_diff_gradient(&params, &s, &v, 1, 1e-6).unwrap();
        assert!((fd.d_x_conj - &g.d_x_conj).camax() < 1e-7);
    }

    #[test]
    fn finite_difference_step_robustness() {
        let (params, s, v) = random_case(4, 1);
        let a = finite_diff_gradient(&params, &s, &v, 2, 1e-5).unwrap();
        let b = finite_diff_gradient(&params, &s, &v, 2, 5e-6).unwrap();
        assert!((a.d_x_conj - b.d_x_conj).camax() < 1e-8);
        assert!(finite_diff_gradient(&params, &s, &v, 2, 0.0).is_err());
    }

    #[test]
    fn paired_chains_are_conjugate() {
        for seed in 0..10 {
            let (params, s, v) = random_case(100 + seed, 2);
            let tape = predict_unrolled(&params, &s, 4).unwrap();
            let paired = backward_paired(&tape, &v).unwrap();
            let single = backward(&tape, &v).unwrap();
            assert!((paired.d_x - paired.d_x_conj.map(|z| z.conj())).camax() < 1e-12);
            assert!((&paired.d_x_conj - &single.d_x_conj).camax() < 1e-12);
        }
    }

    #[test]
    fn holomorphic_half_matches_finite_differences() {
        // dL/dX = (dL/dRe - j dL/dIm) / 2 = conj of the Wirtinger descent gradient.
        let (params, s, v) = random_case(7, 1);
        let tape = predict_unrolled(&params, &s, 3).unwrap();
        let paired = backward_paired(&tape, &v).unwrap();
        let fd = finite_diff_gradient(&params, &s, &v, 3, 1e-6).unwrap();
        assert_close(&paired.d_x, &fd.d_x(), 1e-5, 1e-9);
    }

    #[test]
    fn mean_square_gradient_is_homogeneous_in_residual() {
        let (params, s, _) = random_case(9, 2);
        let tape = predict_unrolled(&params, &s, 2).unwrap();
        let direction = CVector::from_fn(6, |i, _| c(0.01 * (i as f64 - 2.5), 0.003 * i as f64));
        let target =
            |alpha: f64| VoltageProfile::new(tape.prediction() - &direction * c(alpha, 0.0));
        let g1 = backward_mean_square(&tape, &target(1.0)).unwrap();
        let g3 = backward_mean_square(&tape, &target(3.0)).unwrap();
        assert!((g3.d_x_conj - g1.d_x_conj * c(3.0, 0.0)).camax() < 1e-14);
    }

    #[test]
    fn degenerate_iterate_is_reported() {
        let (mut params, s, v) = random_case(5, 1);
        params.w_hat[0] = ZERO;
        let tape = ForwardTape {
            params: &params,
            injection: &s,
            iterates: vec![params.w_hat.clone(), v.v.clone()],
            converged: false,
        };
        assert!(matches!(
            backward(&tape, &VoltageProfile::new(v.v.map(|z| z * 0.9))),
            Err(Error::DegenerateVoltage { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn backward_matches_finite_differences(
            seed in any::<u64>(),
            n_buses in prop::sample::select(vec![1usize, 2]),
            unroll in prop::sample::select(vec![1usize, 2, 5]),
        ) {
            let (params, s, v) = random_case(seed, n_buses);
            let tape = predict_unrolled(&params, &s, unroll).unwrap();
            let g = backward(&tape, &v).unwrap();
            let fd = finite_diff_gradient(&params, &s, &v, unroll, 1e-6).unwrap();
            assert_close(&g.d_x_conj, &fd.d_x_conj, 1e-5, 1e-9);
        }
    }
}
