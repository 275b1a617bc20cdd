//! Regression estimates from an observed short-rate series, periodogram delay
//! selection and the Ljung–Box residual check.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::shortrate::{ModelParams, PathSample, ShortRateError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("series too short: need {need} observations, have {have}")]
    TooShort { need: usize, have: usize },
    #[error("delay {tau} is shorter than the observation step {dt}")]
    DelayBelowStep { tau: f64, dt: f64 },
    #[error("regressors are collinear (condition {0:e})")]
    SingularDesign(f64),
    #[error("fitted transition is not mean-reverting in the exponent: slope {0}")]
    InvalidSlope(f64),
    #[error("lag must be at least one")]
    InvalidLag,
    #[error(transparent)]
    ShortRate(#[from] ShortRateError),
}

/// Candidate delays, strongest periodogram peak first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayCandidateSet {
    pub delays: Vec<f64>,
    pub powers: Vec<f64>,
    /// peak power below four times the median power
    pub low_power: Vec<bool>,
}

const LOW_POWER_RATIO: f64 = 4.0;

/// Peaks of the periodogram of the mean-removed series, converted to periods.
pub fn select_delays(series: &PathSample, max_candidates: usize) -> Result<DelayCandidateSet, EstimationError> {
    let n = series.values.len();
    if n < 64 {
        return Err(EstimationError::TooShort { need: 64, have: n });
    }
    let mean = series.values.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = series.values.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    // power at frequencies k/(nΔ), k = 1..n/2
    let power: Vec<f64> = buf[1..=n / 2].iter().map(|z| z.norm_sqr() / n as f64).collect();
    let mut sorted = power.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[sorted.len() / 2];
    let mut peaks: Vec<(usize, f64)> = (1..power.len().saturating_sub(1))
        .filter(|&i| power[i] > power[i - 1] && power[i] > power[i + 1] && power[i] > median)
        .map(|i| (i + 1, power[i]))
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    peaks.truncate(max_candidates);
    let span = n as f64 * series.dt;
    Ok(DelayCandidateSet {
        delays: peaks.iter().map(|&(k, _)| span / k as f64).collect(),
        powers: peaks.iter().map(|p| p.1).collect(),
        low_power: peaks.iter().map(|p| !(p.1 >= LOW_POWER_RATIO * median)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LjungBox {
    pub q: f64,
    pub p_value: f64,
    /// residuals with zero variance; p is reported as 1
    pub degenerate: bool,
}

/// Ljung–Box portmanteau test on `lag` autocorrelations.
pub fn ljung_box(residuals: &[f64], lag: usize) -> Result<LjungBox, EstimationError> {
    if lag == 0 {
        return Err(EstimationError::InvalidLag);
    }
    let n = residuals.len();
    if n <= 10 * lag {
        return Err(EstimationError::TooShort { need: 10 * lag + 1, have: n });
    }
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let c0: f64 = residuals.iter().map(|r| (r - mean) * (r - mean)).sum();
    if !(c0 > 0.0) {
        return Ok(LjungBox {
            q: 0.0,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let nf = n as f64;
    let q = (1..=lag)
        .map(|k| {
            let ck: f64 = (k..n).map(|i| (residuals[i] - mean) * (residuals[i - k] - mean)).sum();
            let rho = ck / c0;
            rho * rho / (nf - k as f64)
        })
        .sum::<f64>()
        * nf
        * (nf + 2.0);
    let chi = ChiSquared::new(lag as f64).expect("positive dof");
    Ok(LjungBox {
        q,
        p_value: chi.sf(q).clamp(0.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub params: ModelParams,
    /// in-sample mean squared one-step error
    pub mse: f64,
    pub residuals: Vec<f64>,
    pub lb_pvalue: f64,
    pub lb_degenerate: bool,
    /// 95% intervals for a, b, c_1..c_N
    pub estimates: Vec<Estimate>,
    pub observations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: Param,
    pub value: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    A,
    B,
    C(usize),
}

impl Estimate {
    pub fn covers(&self, truth: f64) -> bool {
        self.lower <= truth && truth <= self.upper
    }
}

struct Design {
    y: Vec<f64>,
    prev: Vec<f64>,
    /// delayed values at the left and right end of each step
    lagged: Vec<(Vec<f64>, Vec<f64>)>,
}

fn design(series: &PathSample, delays: &[f64]) -> Result<Design, EstimationError> {
    let dt = series.dt;
    for &tau in delays {
        if !(tau >= dt * (1.0 - 1e-9)) {
            return Err(EstimationError::DelayBelowStep { tau, dt });
        }
    }
    let n = series.values.len();
    let tau_max = delays.iter().cloned().fold(0.0, f64::max);
    // first step i − 1 whose delayed left end is observed
    let first = ((tau_max / dt) - 1e-9).ceil().max(0.0) as usize;
    let need = first + 12;
    if n < need {
        return Err(EstimationError::TooShort { need, have: n });
    }
    let v = &series.values;
    let idx = first + 1..n;
    Ok(Design {
        y: idx.clone().map(|i| v[i]).collect(),
        prev: idx.clone().map(|i| v[i - 1]).collect(),
        lagged: delays
            .iter()
            .map(|&tau| {
                let left = idx.clone().map(|i| series.value_at(series.time(i - 1) - tau)).collect();
                let right = idx.clone().map(|i| series.value_at(series.time(i) - tau)).collect();
                (left, right)
            })
            .collect(),
    })
}

struct Ols {
    beta: Vec<f64>,
    cov: DMatrix<f64>,
    resid: Vec<f64>,
    dof: usize,
}

const MAX_CONDITION: f64 = 1e10;

fn ols(columns: &[Vec<f64>], y: &[f64]) -> Result<Ols, EstimationError> {
    let n = y.len();
    let p = columns.len();
    let scale: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE))
        .collect();
    let x = DMatrix::from_fn(n, p, |i, j| columns[j][i] / scale[j]);
    let svd = x.clone().svd(true, true);
    let (smax, smin) = svd
        .singular_values
        .iter()
        .fold((0.0f64, f64::INFINITY), |(a, b), &s| (a.max(s), b.min(s)));
    let cond = smax / smin;
    if !(cond < MAX_CONDITION) {
        return Err(EstimationError::SingularDesign(cond));
    }
    let yv = DVector::from_column_slice(y);
    let z = svd.solve(&yv, 0.0).map_err(|_| EstimationError::SingularDesign(cond))?;
    let fitted = &x * &z;
    let resid: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    let dof = n - p;
    let s2 = resid.iter().map(|r| r * r).sum::<f64>() / dof as f64;
    let xtx_inv = (x.transpose() * &x)
        .try_inverse()
        .ok_or(EstimationError::SingularDesign(cond))?;
    let cov = DMatrix::from_fn(p, p, |i, j| s2 * xtx_inv[(i, j)] / (scale[i] * scale[j]));
    Ok(Ols {
        beta: (0..p).map(|j| z[j] / scale[j]).collect(),
        cov,
        resid,
        dof,
    })
}

/// ∫_0^Δ e^{b u} du
fn intercept_weight(b: f64, dt: f64) -> f64 {
    if b == 0.0 {
        dt
    } else {
        (b * dt).exp_m1() / b
    }
}

/// ∫_0^Δ e^{2b u} du
fn noise_weight(b: f64, dt: f64) -> f64 {
    intercept_weight(2.0 * b, dt)
}

/// One regression with the trapezoid weights frozen at `wb`.
fn fit_at(series: &PathSample, d: &Design, wb: f64) -> Result<(Ols, f64), EstimationError> {
    let dt = series.dt;
    let e = (wb * dt).exp();
    let mut cols = vec![d.prev.clone(), vec![1.0; d.y.len()]];
    for (l, r) in &d.lagged {
        cols.push(l.iter().zip(r).map(|(a, b)| 0.5 * dt * (e * a + b)).collect());
    }
    let fit = ols(&cols, &d.y)?;
    let slope = fit.beta[0];
    if !(slope > 0.0) {
        return Err(EstimationError::InvalidSlope(slope));
    }
    let b = slope.ln() / dt;
    Ok((fit, b))
}

/// Fixed-point passes on the weight rate; stops when b moves less than this.
const WEIGHT_TOL: f64 = 1e-12;
const MAX_WEIGHT_PASSES: usize = 50;

/// Fit r_i = e^{bΔ} r_{i−1} + a ∫e^{b u}du + Σ c_j Δ/2 (e^{bΔ} r(t_{i−1}−τ_j) + r(t_i−τ_j)) by least squares.
///
/// The trapezoid weights depend on b. The first pass takes b from the delay-free
/// regression; later passes reuse the previous b until it settles.
pub fn fit_transition(series: &PathSample, delays: &[f64]) -> Result<EstimationResult, EstimationError> {
    let d = design(series, delays)?;
    let (_, mut wb) = fit_at(series, &design(series, &[])?, 0.0)?;
    for _ in 0..MAX_WEIGHT_PASSES {
        let (_, b) = fit_at(series, &d, wb)?;
        let done = (b - wb).abs() <= WEIGHT_TOL * b.abs().max(1.0);
        wb = b;
        if done {
            break;
        }
    }
    fit_with_weight_rate(series, &d, delays, wb)
}

fn fit_with_weight_rate(series: &PathSample, d: &Design, delays: &[f64], wb: f64) -> Result<EstimationResult, EstimationError> {
    let dt = series.dt;
    let (fit, b) = fit_at(series, d, wb)?;
    let i0 = intercept_weight(b, dt);
    let a = fit.beta[1] / i0;
    let c: Vec<f64> = fit.beta[2..].to_vec();
    let n = d.y.len();
    let mse = fit.resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let s2 = fit.resid.iter().map(|r| r * r).sum::<f64>() / fit.dof as f64;
    let sigma = (s2 / noise_weight(b, dt)).sqrt();
    let sd = s2.sqrt();
    let residuals: Vec<f64> = fit.resid.iter().map(|r| r / sd.max(f64::MIN_POSITIVE)).collect();
    let q = StudentsT::new(0.0, 1.0, fit.dof as f64).expect("dof > 0").inverse_cdf(0.975);
    let est = |name, value: f64, se: f64| Estimate {
        name,
        value,
        se,
        lower: value - q * se,
        upper: value + q * se,
    };
    let slope = fit.beta[0];
    let mut estimates = vec![
        est(Param::A, a, fit.cov[(1, 1)].sqrt() / i0.abs()),
        est(Param::B, b, fit.cov[(0, 0)].sqrt() / (slope * dt)),
    ];
    for (j, cj) in c.iter().enumerate() {
        estimates.push(est(Param::C(j), *cj, fit.cov[(j + 2, j + 2)].sqrt()));
    }
    // the model wants increasing delays; estimates keep the caller's order
    let (cc, tt) = if delays.is_empty() {
        (vec![0.0], vec![dt])
    } else {
        let mut pairs: Vec<(f64, f64)> = delays.iter().cloned().zip(c).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        pairs.into_iter().map(|(t, c)| (c, t)).unzip()
    };
    let params = ModelParams::constant(a, b, cc, tt, sigma.max(f64::MIN_POSITIVE))?;
    let lb = ljung_box(&residuals, 1)?;
    Ok(EstimationResult {
        params,
        mse,
        residuals,
        lb_pvalue: lb.p_value,
        lb_degenerate: lb.degenerate,
        estimates,
        observations: n,
    })
}

/// Nested fits with the first 0, 1, 2, … candidates.
///
/// All fits share the trapezoid weight rate of the largest model and the sample
/// of that model, so their regressor spaces are nested and the in-sample MSE
/// cannot increase.
pub fn incremental_delay_sweep(series: &PathSample, candidates: &DelayCandidateSet) -> Result<Vec<EstimationResult>, EstimationError> {
    let all = &candidates.delays;
    let full = fit_transition(series, all)?;
    let wb = full.params.coeffs.b;
    let tau_max = all.iter().cloned().fold(0.0, f64::max);
    (0..=all.len())
        .into_par_iter()
        .map(|k| {
            let delays = &all[..k];
            let mut d = design(series, delays)?;
            // trim to the common sample of the largest model
            let first = ((tau_max / series.dt) - 1e-9).ceil().max(0.0) as usize;
            let keep = series.values.len() - (first + 1);
            let cut = d.y.len() - keep;
            d.y.drain(..cut);
            d.prev.drain(..cut);
            for (l, r) in d.lagged.iter_mut() {
                l.drain(..cut);
                r.drain(..cut);
            }
            fit_with_weight_rate(series, &d, delays, wb)
        })
        .collect()
}
