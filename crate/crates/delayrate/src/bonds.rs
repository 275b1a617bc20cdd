//! Zero-coupon bonds, the exponential-affine transform, the characteristic
//! function of r_T and instantaneous forward rates.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::series_kernel::{eval_a, Kernel};
use crate::shortrate::{
    conditional_law_with, delay_history_term, integrate_against, simulate_map, InitialCurve,
    ModelParams, PathSample, Scheme, ShortRateError,
};
use crate::termfn::PiecewiseConstant;

/// Parameters of E[exp(z r_T + ∫_t^T (d0 + d1 r_u) du) | F_t].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransformSpec {
    pub z: Complex64,
    pub d0: f64,
    pub d1: f64,
    pub maturity: f64,
}

/// A market discount factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BondQuote {
    pub maturity: f64,
    pub price: f64,
}

fn check_times(history: &PathSample, model: &ModelParams, t: f64, maturity: f64) -> Result<(), ShortRateError> {
    if !(t >= 0.0) || !(maturity >= t) {
        return Err(ShortRateError::InvalidArgument(format!(
            "need 0 <= t <= T, got t = {t}, T = {maturity}"
        )));
    }
    history.check_covers(t - model.tau_max(), t)
}

/// Exponent of the transform given a prebuilt kernel covering T − t.
fn transform_exponent(
    model: &ModelParams,
    kernel: &Kernel,
    history: &PathSample,
    t: f64,
    spec: &AffineTransformSpec,
) -> Result<Complex64, ShortRateError> {
    let ell = spec.maturity - t;
    let a = eval_a(
        kernel,
        &model.a,
        &model.sigma,
        spec.maturity,
        ell,
        spec.z,
        spec.d0,
        spec.d1,
    )?;
    let d = kernel.d(ell, spec.z, spec.d1)?;
    let mut hist = Complex64::new(0.0, 0.0);
    if spec.z != Complex64::new(0.0, 0.0) {
        hist += spec.z * history_r(kernel, history, t, spec.maturity)?;
    }
    if spec.d1 != 0.0 {
        hist += spec.d1 * history_i(kernel, history, t, spec.maturity)?;
    }
    Ok(a + d * history.value_at(t) + hist)
}

/// Σ_j c_j ∫_{t−τ_j}^t R(T−u−τ_j) r_u du.
fn history_r(kernel: &Kernel, history: &PathSample, t: f64, maturity: f64) -> Result<f64, ShortRateError> {
    let mut err = None;
    let v = delay_history_term(kernel, history, t, maturity, |x| match kernel.r(x) {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            0.0
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(v),
    }
}

/// Σ_j c_j ∫_{t−τ_j}^t I(T−u−τ_j) r_u du.
fn history_i(kernel: &Kernel, history: &PathSample, t: f64, maturity: f64) -> Result<f64, ShortRateError> {
    let mut err = None;
    let v = delay_history_term(kernel, history, t, maturity, |x| match kernel.i(x) {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            0.0
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(v),
    }
}

/// E[exp(z r_T + ∫_t^T (d0 + d1 r_u) du) | F_t].
pub fn affine_transform(
    model: &ModelParams,
    history: &PathSample,
    t: f64,
    spec: AffineTransformSpec,
) -> Result<Complex64, ShortRateError> {
    if !(spec.maturity > t) {
        return Err(ShortRateError::InvalidArgument("transform needs T > t".into()));
    }
    check_times(history, model, t, spec.maturity)?;
    let kernel = model.kernel(spec.maturity - t)?;
    Ok(transform_exponent(model, &kernel, history, t, &spec)?.exp())
}

/// ln B(t, T) with a kernel covering at least T − t.
pub(crate) fn log_bond_with(
    model: &ModelParams,
    kernel: &Kernel,
    history: &PathSample,
    t: f64,
    maturity: f64,
) -> Result<f64, ShortRateError> {
    if maturity == t {
        return Ok(0.0);
    }
    let spec = AffineTransformSpec {
        z: Complex64::new(0.0, 0.0),
        d0: 0.0,
        d1: -1.0,
        maturity,
    };
    Ok(transform_exponent(model, kernel, history, t, &spec)?.re)
}

/// Zero-coupon bond price B(t, T).
pub fn bond_price(
    model: &ModelParams,
    history: &PathSample,
    t: f64,
    maturity: f64,
) -> Result<f64, ShortRateError> {
    check_times(history, model, t, maturity)?;
    if maturity == t {
        return Ok(1.0);
    }
    let kernel = model.kernel(maturity - t)?;
    Ok(log_bond_with(model, &kernel, history, t, maturity)?.exp())
}

/// Bond prices at several maturities sharing one kernel.
pub fn bond_prices(
    model: &ModelParams,
    history: &PathSample,
    t: f64,
    maturities: &[f64],
) -> Result<Vec<f64>, ShortRateError> {
    let horizon = maturities.iter().cloned().fold(t, f64::max);
    check_times(history, model, t, horizon)?;
    let kernel = model.kernel(horizon - t)?;
    maturities
        .iter()
        .map(|&m| {
            check_times(history, model, t, m)?;
            Ok(log_bond_with(model, &kernel, history, t, m)?.exp())
        })
        .collect()
}

/// E[exp(iu r_T) | F_t].
pub fn char_function(
    model: &ModelParams,
    history: &PathSample,
    t: f64,
    maturity: f64,
    u: f64,
) -> Result<Complex64, ShortRateError> {
    check_times(history, model, t, maturity)?;
    let kernel = model.kernel(maturity - t)?;
    let law = conditional_law_with(model, &kernel, history, t, maturity)?;
    Ok(Complex64::new(-0.5 * u * u * law.variance, u * law.mean).exp())
}

fn squared(f: &PiecewiseConstant) -> PiecewiseConstant {
    PiecewiseConstant::new(f.breaks().to_vec(), f.values().iter().map(|s| s * s).collect())
        .expect("same shape")
}

pub(crate) fn forward_rate_with(
    model: &ModelParams,
    kernel: &Kernel,
    history: &PathSample,
    t: f64,
    maturity: f64,
) -> Result<f64, ShortRateError> {
    let h = maturity - t;
    let mut err = None;
    let mut guard = |v: Result<f64, _>| match v {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            0.0
        }
    };
    let drift = match model.a.as_constant() {
        Some(a) => a * kernel.i(h)?,
        None => integrate_against(kernel, &model.a, maturity, h, |u| guard(kernel.r(u))),
    };
    let convexity = integrate_against(kernel, &squared(&model.sigma), maturity, h, |u| {
        let r = kernel.r(u);
        let i = kernel.i(u);
        match (r, i) {
            (Ok(r), Ok(i)) => -i * r,
            (Err(e), _) | (_, Err(e)) => {
                err.get_or_insert(e);
                0.0
            }
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    Ok(drift + convexity + kernel.r(h)? * history.value_at(t) + history_r(kernel, history, t, maturity)?)
}

/// Instantaneous forward rate f(t, T).
pub fn forward_rate(
    model: &ModelParams,
    history: &PathSample,
    t: f64,
    maturity: f64,
) -> Result<f64, ShortRateError> {
    check_times(history, model, t, maturity)?;
    let kernel = model.kernel(maturity - t)?;
    forward_rate_with(model, &kernel, history, t, maturity)
}

/// Monte Carlo estimate of E[f(t+dt,T) − f(t,T) | F_t] minus σ²(t) I(T−t) R(T−t) dt,
/// with its standard error.
///
/// Paths run from t on sub-steps of dt/4, which must divide every delay.
#[allow(clippy::too_many_arguments)]
pub fn hjm_drift_residual(
    model: &ModelParams,
    history: &PathSample,
    t: f64,
    maturity: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64), ShortRateError> {
    if !(dt > 0.0) || !(t + dt < maturity) {
        return Err(ShortRateError::InvalidArgument(format!(
            "need t + dt < T, got t = {t}, dt = {dt}, T = {maturity}"
        )));
    }
    check_times(history, model, t, maturity)?;
    if n_paths < 2 {
        return Err(ShortRateError::InvalidArgument("need at least two paths".into()));
    }
    let sub = 4usize;
    let step = dt / sub as f64;
    let tau_n = model.tau_max();
    let cells = (tau_n / step).round() as usize;
    // the model seen from time t
    let shifted = ModelParams {
        coeffs: model.coeffs.clone(),
        a: shift(&model.a, t),
        sigma: shift(&model.sigma, t),
    };
    let phi = InitialCurve::from_fn(tau_n, cells, |s| history.value_at(t + s))?;
    let r0 = history.value_at(t);
    let start_path = phi.to_history(r0);
    let big = maturity - t;
    let kernel = model.kernel(big)?;
    let f0 = forward_rate_with(&shifted, &kernel, &start_path, 0.0, big)?;

    // f(dt, T') on each path is deterministic part + R(T'−dt) r_dt + Σ c_j ∫ R(..) r du
    let later = big - dt;
    let empty = PathSample::flat(dt, tau_n, step, 0.0);
    let deterministic = forward_rate_with(&shifted, &kernel, &empty, dt, big)?;
    let r_end = kernel.r(later)?;
    let co = &model.coeffs;
    let lags: Vec<f64> = kernel.terms().iter().map(|m| m.lag).collect();
    let mut weights = Vec::new();
    let template = PathSample::new(-(cells as f64) * step, step, 0.0, vec![0.0; cells + sub + 1], None)?;
    for (cj, tj) in co.c.iter().zip(&co.tau) {
        if *cj == 0.0 {
            continue;
        }
        let kinks: Vec<f64> = lags.iter().map(|l| big - tj - l).collect();
        let (i0, w) = template.integral_weights(dt - tj, dt.min(big - tj), &kinks, co.b, |u| {
            kernel.r(big - u - tj).unwrap_or(0.0) * cj
        });
        weights.push((i0, w));
    }
    let (_, _, samples) = simulate_map(Scheme::Exact, &shifted, &phi, r0, dt, step, n_paths, seed, |_, v| {
        let mut f = deterministic + r_end * v[v.len() - 1];
        for (i0, w) in &weights {
            f += w.iter().enumerate().map(|(k, wk)| wk * v[i0 + k]).sum::<f64>();
        }
        f
    })?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let s = model.sigma.eval(t);
    let drift = s * s * kernel.i(big)? * kernel.r(big)? * dt;
    Ok((mean - f0 - drift, (var / n).sqrt()))
}

fn shift(f: &PiecewiseConstant, t: f64) -> PiecewiseConstant {
    PiecewiseConstant::new(f.breaks().iter().map(|x| x - t).collect(), f.values().to_vec())
        .expect("shift keeps shape")
}
