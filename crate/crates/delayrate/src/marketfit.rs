//! Yield curves, the implied initial function φ and calibration to bond and caplet prices.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{minimize_with_restarts, nelder_mead, NelderMeadOptions};
use crate::quad;
use crate::rfr_caplets::{benchmark_price, black_type_price, nu_with, BenchmarkKind, BenchmarkParams, CapletError, CapletQuote};
use crate::series_kernel::{DelayCoefficients, Kernel, KernelError, SeriesConfig};
use crate::shortrate::{InitialCurve, ModelParams, ShortRateError};
use crate::termfn::PiecewiseConstant;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("maturity {s} outside the curve range (0, {max}]")]
    OutOfRange { s: f64, max: f64 },
    #[error("implied initial curve needs c_1 != 0")]
    DegenerateC,
    #[error("curve ends at {have}, shorter than the delay {need}")]
    CurveTooShort { need: f64, have: f64 },
    #[error("implied initial curve supports exactly one delay, got {0}")]
    MultipleDelays(usize),
    #[error("implied initial curve needs a constant sigma")]
    NonConstantSigma,
    #[error("optimizer found no finite objective value")]
    OptimizerDiverged,
    #[error("no quotes to fit")]
    NoQuotes,
    #[error(transparent)]
    ShortRate(#[from] ShortRateError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Caplet(#[from] CapletError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Fritsch–Carlson monotone cubic on yields, flat below the first maturity.
    MonotoneCubic,
    /// Linear in log-discount through (0, 0), flat-forward beyond the last maturity.
    LogLinear,
    /// Nelson–Siegel–Svensson least-squares fit to the yields.
    Nss,
    /// Nelson–Siegel least-squares fit to the discount factors.
    NelsonSiegel,
}

/// y(s) = β0 + β1 h(s/λ1) + β2 (h(s/λ1) − e^{−s/λ1}) + β3 (h(s/λ2) − e^{−s/λ2}),
/// h(x) = (1 − e^{−x})/x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NssParams {
    pub beta: [f64; 4],
    pub lambda: [f64; 2],
}

fn h1(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - 0.5 * x
    } else {
        -(-x).exp_m1() / x
    }
}

impl NssParams {
    fn basis(&self, s: f64) -> [f64; 4] {
        nss_basis(s, self.lambda[0], self.lambda[1])
    }

    pub fn yield_at(&self, s: f64) -> f64 {
        self.basis(s).iter().zip(&self.beta).map(|(x, b)| x * b).sum()
    }

    /// Instantaneous forward d(s y)/ds.
    pub fn forward(&self, s: f64) -> f64 {
        let [b0, b1, b2, b3] = self.beta;
        let (x, z) = (s / self.lambda[0], s / self.lambda[1]);
        b0 + b1 * (-x).exp() + b2 * x * (-x).exp() + b3 * z * (-z).exp()
    }

    pub fn forward_slope(&self, s: f64) -> f64 {
        let [_, b1, b2, b3] = self.beta;
        let [l1, l2] = self.lambda;
        let (x, z) = (s / l1, s / l2);
        -b1 / l1 * (-x).exp() + b2 / l1 * (1.0 - x) * (-x).exp() + b3 / l2 * (1.0 - z) * (-z).exp()
    }
}

fn nss_basis(s: f64, l1: f64, l2: f64) -> [f64; 4] {
    let (x, z) = (s / l1, s / l2);
    let (hx, hz) = (h1(x), h1(z));
    [1.0, hx, hx - (-x).exp(), hz - (-z).exp()]
}

/// Least-squares NSS fit by variable projection: β solved linearly for each (λ1, λ2).
pub fn fit_nss(maturities: &[f64], yields: &[f64]) -> Result<NssParams, FitError> {
    if maturities.len() < 6 {
        return Err(FitError::InvalidCurve("NSS fit needs at least six points".into()));
    }
    let y = DVector::from_column_slice(yields);
    let solve = |l1: f64, l2: f64| -> Option<(f64, [f64; 4])> {
        if !(l1.is_finite() && l2.is_finite()) || l1 <= 1e-3 || l2 <= 1e-3 || l1 > 1e3 || l2 > 1e3 {
            return None;
        }
        let rows: Vec<f64> = maturities.iter().flat_map(|&s| nss_basis(s, l1, l2)).collect();
        let a = DMatrix::from_row_slice(maturities.len(), 4, &rows);
        let beta = a.clone().svd(true, true).solve(&y, 1e-14).ok()?;
        let r = &a * &beta - &y;
        Some((r.norm_squared(), [beta[0], beta[1], beta[2], beta[3]]))
    };
    let f = |z: &[f64]| solve(z[0].exp(), z[1].exp()).map_or(f64::INFINITY, |v| v.0);
    let opts = NelderMeadOptions {
        max_evals: 4000,
        x_tol: 1e-12,
        f_tol: 1e-14,
    };
    let starts = [(1.0, 10.0), (3.0, 12.0), (5.0, 15.0), (0.5, 5.0), (2.0, 20.0)];
    let best = starts
        .iter()
        .map(|&(a, b)| nelder_mead(f, &[f64::ln(a), f64::ln(b)], &[0.3, 0.3], &opts))
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .ok_or(FitError::OptimizerDiverged)?;
    let (l1, l2) = (best.x[0].exp(), best.x[1].exp());
    let (_, beta) = solve(l1, l2).ok_or(FitError::OptimizerDiverged)?;
    Ok(NssParams {
        beta,
        lambda: [l1, l2],
    })
}

/// Nelson–Siegel fit (β3 = 0) minimizing squared discount-factor errors.
///
/// Uses variable projection on yields weighted by T·B(T), the first-order
/// price sensitivity, so β stays linear; λ comes from a log grid and a
/// one-dimensional polish.
pub fn fit_nelson_siegel(maturities: &[f64], yields: &[f64]) -> Result<NssParams, FitError> {
    if maturities.len() < 4 {
        return Err(FitError::InvalidCurve("Nelson–Siegel fit needs at least four points".into()));
    }
    let n = maturities.len();
    let w: Vec<f64> = maturities.iter().zip(yields).map(|(t, y)| t * (-y * t).exp()).collect();
    let yw = DVector::from_iterator(n, yields.iter().zip(&w).map(|(y, w)| y * w));
    let solve = |l: f64| -> Option<(f64, [f64; 4])> {
        if !(l.is_finite() && l > 1e-3 && l < 1e3) {
            return None;
        }
        let rows: Vec<f64> = maturities
            .iter()
            .zip(&w)
            .flat_map(|(&s, &wi)| {
                let b = nss_basis(s, l, l);
                [wi * b[0], wi * b[1], wi * b[2]]
            })
            .collect();
        let a = DMatrix::from_row_slice(n, 3, &rows);
        let beta = a.clone().svd(true, true).solve(&yw, 1e-14).ok()?;
        let r = &a * &beta - &yw;
        Some((r.norm_squared(), [beta[0], beta[1], beta[2], 0.0]))
    };
    let f = |z: &[f64]| solve(z[0].exp()).map_or(f64::INFINITY, |v| v.0);
    let (lo, hi) = (0.05f64.ln(), 30f64.ln());
    let start = (0..=400)
        .map(|i| lo + (hi - lo) * i as f64 / 400.0)
        .min_by(|a, b| f(&[*a]).total_cmp(&f(&[*b])))
        .expect("non-empty grid");
    let opts = NelderMeadOptions {
        max_evals: 500,
        x_tol: 1e-12,
        f_tol: 1e-20,
    };
    let best = nelder_mead(f, &[start], &[0.01], &opts);
    let l = best.x[0].exp();
    let (_, beta) = solve(l).ok_or(FitError::OptimizerDiverged)?;
    Ok(NssParams { beta, lambda: [l, l] })
}

/// Continuously compounded spot yields at increasing maturities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldCurve {
    maturities: Vec<f64>,
    yields: Vec<f64>,
    scheme: Interpolation,
    slopes: Vec<f64>,
    nss: Option<NssParams>,
}

impl YieldCurve {
    pub fn new(maturities: Vec<f64>, yields: Vec<f64>, scheme: Interpolation) -> Result<Self, FitError> {
        if maturities.len() != yields.len() || maturities.is_empty() {
            return Err(FitError::InvalidCurve("need equally many maturities and yields".into()));
        }
        if !(maturities[0] > 0.0) || maturities.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FitError::InvalidCurve("maturities must be positive and strictly increasing".into()));
        }
        if maturities.iter().chain(&yields).any(|v| !v.is_finite()) {
            return Err(FitError::InvalidCurve("non-finite curve value".into()));
        }
        let slopes = pchip_slopes(&maturities, &yields);
        let nss = match scheme {
            Interpolation::Nss => Some(fit_nss(&maturities, &yields)?),
            Interpolation::NelsonSiegel => Some(fit_nelson_siegel(&maturities, &yields)?),
            _ => None,
        };
        Ok(Self {
            maturities,
            yields,
            scheme,
            slopes,
            nss,
        })
    }

    /// Curve given by NSS parameters, sampled at `maturities`.
    pub fn from_nss(params: NssParams, maturities: Vec<f64>) -> Result<Self, FitError> {
        let yields: Vec<f64> = maturities.iter().map(|&s| params.yield_at(s)).collect();
        let mut c = Self::new(maturities, yields, Interpolation::MonotoneCubic)?;
        c.scheme = Interpolation::Nss;
        c.nss = Some(params);
        Ok(c)
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn yields(&self) -> &[f64] {
        &self.yields
    }

    pub fn scheme(&self) -> Interpolation {
        self.scheme
    }

    pub fn nss_params(&self) -> Option<NssParams> {
        self.nss
    }

    pub fn max_maturity(&self) -> f64 {
        *self.maturities.last().unwrap()
    }

    fn check(&self, s: f64) -> Result<(), FitError> {
        let max = self.max_maturity();
        let extrapolates = self.scheme == Interpolation::LogLinear;
        if !(s >= 0.0) || (!extrapolates && s > max * (1.0 + 1e-12)) {
            return Err(FitError::OutOfRange { s, max });
        }
        Ok(())
    }

    /// Market discount factors exp(−y T) at the knots.
    pub fn knot_prices(&self) -> Vec<f64> {
        self.maturities
            .iter()
            .zip(&self.yields)
            .map(|(t, y)| (-y * t).exp())
            .collect()
    }

    fn log_discount(&self, s: f64) -> f64 {
        match self.scheme {
            Interpolation::LogLinear => {
                let m = &self.maturities;
                let l = |i: usize| -self.yields[i] * m[i];
                let n = m.len();
                if s <= m[0] {
                    return l(0) * s / m[0];
                }
                if s >= m[n - 1] {
                    let slope = if n == 1 {
                        l(0) / m[0]
                    } else {
                        (l(n - 1) - l(n - 2)) / (m[n - 1] - m[n - 2])
                    };
                    return l(n - 1) + slope * (s - m[n - 1]);
                }
                let i = m.partition_point(|&x| x <= s) - 1;
                let w = (s - m[i]) / (m[i + 1] - m[i]);
                l(i) * (1.0 - w) + l(i + 1) * w
            }
            _ => -self.yield_unchecked(s) * s,
        }
    }

    fn yield_unchecked(&self, s: f64) -> f64 {
        match self.scheme {
            Interpolation::Nss | Interpolation::NelsonSiegel => self.nss.unwrap().yield_at(s.max(1e-12)),
            Interpolation::MonotoneCubic => self.pchip(s).0,
            Interpolation::LogLinear => {
                if s == 0.0 {
                    self.yields[0]
                } else {
                    -self.log_discount(s) / s
                }
            }
        }
    }

    /// (y, y', y'') from the monotone cubic, flat below the first knot.
    fn pchip(&self, s: f64) -> (f64, f64, f64) {
        let m = &self.maturities;
        let n = m.len();
        if s <= m[0] || n == 1 {
            return (self.yields[0], 0.0, 0.0);
        }
        let i = (m.partition_point(|&x| x <= s) - 1).min(n - 2);
        let h = m[i + 1] - m[i];
        let t = (s - m[i]) / h;
        let (y0, y1) = (self.yields[i], self.yields[i + 1]);
        let (d0, d1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let (t2, t3) = (t * t, t * t * t);
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * d0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * d1;
        let dv = (6.0 * t2 - 6.0 * t) * y0 + (3.0 * t2 - 4.0 * t + 1.0) * d0 + (-6.0 * t2 + 6.0 * t) * y1 + (3.0 * t2 - 2.0 * t) * d1;
        let ddv = (12.0 * t - 6.0) * y0 + (6.0 * t - 4.0) * d0 + (-12.0 * t + 6.0) * y1 + (6.0 * t - 2.0) * d1;
        (v, dv / h, ddv / (h * h))
    }

    pub fn yield_at(&self, s: f64) -> Result<f64, FitError> {
        self.check(s)?;
        Ok(self.yield_unchecked(s))
    }

    pub fn discount(&self, s: f64) -> Result<f64, FitError> {
        self.check(s)?;
        Ok(self.log_discount(s).exp())
    }

    /// f^M(0, s) = y(s) + s y'(s).
    pub fn market_forward(&self, s: f64) -> Result<f64, FitError> {
        self.check(s)?;
        Ok(match self.scheme {
            Interpolation::Nss | Interpolation::NelsonSiegel => self.nss.unwrap().forward(s),
            Interpolation::MonotoneCubic => {
                let (y, dy, _) = self.pchip(s);
                y + s * dy
            }
            Interpolation::LogLinear => {
                let m = &self.maturities;
                let n = m.len();
                let l = |i: usize| -self.yields[i] * m[i];
                if n == 1 || s < m[0] {
                    -l(0) / m[0]
                } else {
                    let i = (m.partition_point(|&x| x <= s)).clamp(1, n - 1);
                    -(l(i) - l(i - 1)) / (m[i] - m[i - 1])
                }
            }
        })
    }

    /// ∂_s f^M(0, s), differentiating the interpolant analytically.
    pub fn market_forward_slope(&self, s: f64) -> Result<f64, FitError> {
        self.check(s)?;
        Ok(match self.scheme {
            Interpolation::Nss | Interpolation::NelsonSiegel => self.nss.unwrap().forward_slope(s),
            Interpolation::MonotoneCubic => {
                let (_, dy, ddy) = self.pchip(s);
                2.0 * dy + s * ddy
            }
            Interpolation::LogLinear => 0.0,
        })
    }
}

/// Fritsch–Carlson slopes with the one-sided three-point end rule.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![del[0], del[0]];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if del[k - 1] * del[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / del[k - 1] + w2 / del[k]);
        }
    }
    let end = |h0: f64, h1: f64, m0: f64, m1: f64| {
        let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if d.signum() != m0.signum() {
            0.0
        } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            d
        }
    };
    d[0] = end(h[0], h[1], del[0], del[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    d
}

/// φ on [−τ1, 0] reproducing the market curve up to τ1, with r0 = f^M(0,0).
#[derive(Debug, Clone, PartialEq)]
pub struct ImpliedPhi {
    pub phi: InitialCurve,
    pub r0: f64,
    /// φ(0) from the replication formula minus r0
    pub consistency_residual: f64,
}

fn check_single_delay(model: &ModelParams) -> Result<(f64, f64, f64), FitError> {
    let co = &model.coeffs;
    if co.n() != 1 {
        return Err(FitError::MultipleDelays(co.n()));
    }
    if co.c[0] == 0.0 {
        return Err(FitError::DegenerateC);
    }
    let sigma = model.sigma.as_constant().ok_or(FitError::NonConstantSigma)?;
    Ok((co.b, co.c[0], sigma))
}

/// Closed-form φ(s) for s ∈ [−τ1, 0].
pub fn implied_phi_value(curve: &YieldCurve, model: &ModelParams, s: f64) -> Result<f64, FitError> {
    let (b, c1, sigma) = check_single_delay(model)?;
    let tau = model.coeffs.tau[0];
    let x = s + tau;
    let f = curve.market_forward(x)?;
    let df = curve.market_forward_slope(x)?;
    // σ²/(2b)(e^{2bx} − 1), which is σ² x at b = 0
    let conv = if b == 0.0 {
        sigma * sigma * x
    } else {
        sigma * sigma * (2.0 * b * x).exp_m1() / (2.0 * b)
    };
    Ok((df - b * f + conv - model.a.eval(x)) / c1)
}

/// φ sampled with `cells` uniform cells on [−τ1, 0].
pub fn implied_phi(curve: &YieldCurve, model: &ModelParams, cells: usize) -> Result<ImpliedPhi, FitError> {
    check_single_delay(model)?;
    let tau = model.coeffs.tau[0];
    if curve.max_maturity() < tau * (1.0 - 1e-12) {
        return Err(FitError::CurveTooShort {
            need: tau,
            have: curve.max_maturity(),
        });
    }
    let cells = cells.max(1);
    let h = tau / cells as f64;
    let values = (0..=cells)
        .map(|i| implied_phi_value(curve, model, -tau + i as f64 * h))
        .collect::<Result<Vec<_>, _>>()?;
    let r0 = curve.market_forward(0.0)?;
    let residual = values[cells] - r0;
    Ok(ImpliedPhi {
        phi: InitialCurve::new(tau, values)?,
        r0,
        consistency_residual: residual,
    })
}

/// Bond prices B(0,T) for constant a and σ with φ given as a function; cumulative in T.
pub fn bond_curve_with_phi(
    model: &ModelParams,
    phi: &dyn Fn(f64) -> f64,
    r0: f64,
    maturities: &[f64],
) -> Result<Vec<f64>, FitError> {
    let a = model.a.as_constant().ok_or(FitError::NonConstantSigma)?;
    let sigma = model.sigma.as_constant().ok_or(FitError::NonConstantSigma)?;
    let max_t = maturities.iter().cloned().fold(0.0, f64::max);
    let kernel = Kernel::new(&model.coeffs, max_t, SeriesConfig::default())?;
    let b = model.coeffs.b;
    let mut order: Vec<usize> = (0..maturities.len()).collect();
    order.sort_by(|&i, &j| maturities[i].total_cmp(&maturities[j]));

    let mut err = None;
    let mut d_of = |x: f64| -> f64 {
        match kernel.i(x) {
            Ok(v) => -v,
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        }
    };
    let mut out = vec![0.0; maturities.len()];
    let lags = kernel.breakpoints(max_t);
    let mut acc = 0.0;
    let mut at = 0.0;
    for &k in &order {
        let t = maturities[k];
        if t > at {
            let edges = quad::panels(at, t, &lags, b);
            acc += quad::integrate_panels(&edges, |u| {
                let d = d_of(u);
                a * d + 0.5 * sigma * sigma * d * d
            });
            at = t;
        }
        let mut hist = 0.0;
        for (cj, tj) in model.coeffs.c.iter().zip(&model.coeffs.tau) {
            let hi = (t - tj).min(0.0);
            if hi <= -tj {
                continue;
            }
            let kinks: Vec<f64> = lags.iter().map(|l| t - tj - l).collect();
            let edges = quad::panels(-tj, hi, &kinks, b);
            hist += cj * quad::integrate_panels(&edges, |u| d_of(t - u - tj) * phi(u));
        }
        out[k] = (acc + d_of(t) * r0 + hist).exp();
    }
    if let Some(e) = err {
        return Err(e.into());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketBond {
    pub maturity: f64,
    pub price: f64,
}

/// Mean of squared price differences.
pub fn mse(market: &[f64], model: &[f64]) -> f64 {
    market
        .iter()
        .zip(model)
        .map(|(m, p)| (m - p) * (m - p))
        .sum::<f64>()
        / market.len() as f64
}

/// Σ (market − model)² / market.
pub fn rel_sse(market: &[f64], model: &[f64]) -> f64 {
    market.iter().zip(model).map(|(m, p)| (m - p) * (m - p) / m).sum()
}

/// Σ (market − model)².
pub fn abs_sse(market: &[f64], model: &[f64]) -> f64 {
    market.iter().zip(model).map(|(m, p)| (m - p) * (m - p)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub restarts: usize,
    pub seed: u64,
    pub nelder_mead: NelderMeadOptions,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            seed: 20240419,
            nelder_mead: NelderMeadOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub params: ModelParams,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub model_prices: Vec<f64>,
    pub market_prices: Vec<f64>,
}

fn bond_model(x: &[f64], tau1: f64) -> Option<ModelParams> {
    ModelParams::constant(x[0], x[1], vec![x[2]], vec![tau1], x[3].abs()).ok()
}

/// Curve knots with maturity beyond τ1.
pub fn default_bond_quotes(curve: &YieldCurve, tau1: f64) -> Vec<MarketBond> {
    curve
        .maturities()
        .iter()
        .zip(curve.knot_prices())
        .filter(|(m, _)| **m > tau1 * (1.0 + 1e-12))
        .map(|(&maturity, price)| MarketBond { maturity, price })
        .collect()
}

/// Model prices for (a, b, c1, σ) with φ implied from `curve`.
pub fn bond_model_prices(curve: &YieldCurve, model: &ModelParams, maturities: &[f64]) -> Result<Vec<f64>, FitError> {
    check_single_delay(model)?;
    let tau = model.coeffs.tau[0];
    if curve.max_maturity() < tau * (1.0 - 1e-12) {
        return Err(FitError::CurveTooShort {
            need: tau,
            have: curve.max_maturity(),
        });
    }
    let r0 = curve.market_forward(0.0)?;
    let phi = |s: f64| implied_phi_value(curve, model, s).unwrap_or(f64::NAN);
    bond_curve_with_phi(model, &phi, r0, maturities)
}

/// Minimize the bond MSE over (a, b, c1, σ) with τ1 fixed and φ tied to the parameters.
pub fn calibrate_bonds(
    curve: &YieldCurve,
    quotes: Option<&[MarketBond]>,
    tau1: f64,
    init: &ModelParams,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult, FitError> {
    if curve.max_maturity() <= tau1 {
        return Err(FitError::CurveTooShort {
            need: tau1,
            have: curve.max_maturity(),
        });
    }
    let owned;
    let quotes = match quotes {
        Some(q) => q,
        None => {
            owned = default_bond_quotes(curve, tau1);
            &owned
        }
    };
    if quotes.is_empty() {
        return Err(FitError::NoQuotes);
    }
    let mats: Vec<f64> = quotes.iter().map(|q| q.maturity).collect();
    let market: Vec<f64> = quotes.iter().map(|q| q.price).collect();
    let objective = |x: &[f64]| -> f64 {
        match bond_model(x, tau1).map(|m| bond_model_prices(curve, &m, &mats)) {
            Some(Ok(p)) => mse(&market, &p),
            _ => f64::INFINITY,
        }
    };
    let x0 = [
        init.a.as_constant().unwrap_or(init.a.eval(0.0)),
        init.coeffs.b,
        init.coeffs.c.first().copied().unwrap_or(0.0),
        init.sigma.as_constant().unwrap_or(init.sigma.eval(0.0)),
    ];
    let half: Vec<f64> = x0.iter().map(|v| 0.5 * v.abs() + 1e-3).collect();
    let best = minimize_with_restarts(objective, &x0, &half, opts.restarts, opts.seed, &opts.nelder_mead);
    if !best.f.is_finite() {
        return Err(FitError::OptimizerDiverged);
    }
    let params = bond_model(&best.x, tau1).ok_or(FitError::OptimizerDiverged)?;
    let model_prices = bond_model_prices(curve, &params, &mats)?;
    Ok(CalibrationResult {
        params,
        objective: best.f,
        iterations: best.evals,
        converged: best.converged,
        model_prices,
        market_prices: market,
    })
}

/// Caplet model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapletModel {
    Proposed,
    Bachelier,
    Black,
    Vasicek,
}

/// Parameters used by the caplet families; unused fields are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapletParams {
    pub b: f64,
    pub c1: f64,
    pub sigma: f64,
    pub tau1: f64,
}

/// Per-accrual-period inputs shared by every strike.
#[derive(Debug, Clone)]
struct Period {
    s: f64,
    t: f64,
    discount: f64,
    y: f64,
    rows: Vec<usize>,
}

/// Quotes together with the curve used for Y and discounting.
#[derive(Debug, Clone)]
pub struct CapletMarket {
    quotes: Vec<CapletQuote>,
    periods: Vec<Period>,
    price_scale: f64,
}

impl CapletMarket {
    /// `price_scale` converts unit-notional prices to quote units (100 for percent).
    pub fn new(quotes: Vec<CapletQuote>, curve: &YieldCurve, price_scale: f64) -> Result<Self, FitError> {
        if quotes.is_empty() {
            return Err(FitError::NoQuotes);
        }
        let mut groups: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
        for (i, q) in quotes.iter().enumerate() {
            q.validate()?;
            groups.entry((q.s.to_bits(), q.t.to_bits())).or_default().push(i);
        }
        let mut periods = Vec::with_capacity(groups.len());
        for rows in groups.into_values() {
            let q = quotes[rows[0]];
            let discount = curve.discount(q.t)?;
            let y = curve.discount(q.s)? / discount;
            periods.push(Period {
                s: q.s,
                t: q.t,
                discount,
                y,
                rows,
            });
        }
        Ok(Self {
            quotes,
            periods,
            price_scale,
        })
    }

    pub fn quotes(&self) -> &[CapletQuote] {
        &self.quotes
    }

    pub fn market_prices(&self) -> Vec<f64> {
        self.quotes.iter().map(|q| q.price).collect()
    }

    /// (S, T, B(0,T), Y(0)) per accrual period.
    pub fn periods(&self) -> Vec<(f64, f64, f64, f64)> {
        self.periods.iter().map(|p| (p.s, p.t, p.discount, p.y)).collect()
    }

    pub fn price_scale(&self) -> f64 {
        self.price_scale
    }

    /// Model prices in quote units, in quote order.
    pub fn model_prices(&self, model: CapletModel, p: &CapletParams) -> Result<Vec<f64>, FitError> {
        let mut out = vec![0.0; self.quotes.len()];
        match model {
            CapletModel::Proposed => {
                let co = DelayCoefficients::new(p.b, vec![p.c1], vec![p.tau1])?;
                let horizon = self.periods.iter().map(|q| q.t).fold(0.0, f64::max);
                let kernel = Kernel::new(&co, horizon, SeriesConfig::default())?;
                let sigma = PiecewiseConstant::constant(p.sigma.abs());
                for per in &self.periods {
                    let nu = nu_with(&kernel, &sigma, 0.0, per.s, per.s, per.t)?;
                    for &i in &per.rows {
                        let q = &self.quotes[i];
                        out[i] = self.price_scale * black_type_price(per.discount, per.y, q.khat(), nu)?;
                    }
                }
            }
            CapletModel::Vasicek => {
                let co = DelayCoefficients::new(p.b, vec![0.0], vec![1.0])?;
                let horizon = self.periods.iter().map(|q| q.t).fold(0.0, f64::max);
                let kernel = Kernel::new(&co, horizon, SeriesConfig::default())?;
                let sigma = PiecewiseConstant::constant(p.sigma.abs());
                for per in &self.periods {
                    let nu = nu_with(&kernel, &sigma, 0.0, per.s, per.s, per.t)?;
                    for &i in &per.rows {
                        let q = &self.quotes[i];
                        out[i] = self.price_scale * black_type_price(per.discount, per.y, q.khat(), nu)?;
                    }
                }
            }
            CapletModel::Bachelier | CapletModel::Black => {
                let kind = if model == CapletModel::Black {
                    BenchmarkKind::Black
                } else {
                    BenchmarkKind::Bachelier
                };
                let bp = BenchmarkParams { sigma: p.sigma, b: p.b };
                for per in &self.periods {
                    for &i in &per.rows {
                        let q = &self.quotes[i];
                        out[i] = self.price_scale * benchmark_price(kind, bp, q, 0.0, per.discount, per.y)?;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn rel_sse(&self, model: CapletModel, p: &CapletParams) -> f64 {
        match self.model_prices(model, p) {
            Ok(m) => {
                let v = rel_sse(&self.market_prices(), &m);
                if v.is_finite() {
                    v
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapletCalibrationOptions {
    /// (lo, hi, step) of the τ1 grid
    pub tau_grid: (f64, f64, f64),
    /// keep τ1 at the initial value
    pub fix_tau: bool,
    /// τ1 grid points that get full restarts
    pub top_k: usize,
    pub restarts: usize,
    pub seed: u64,
    pub grid_evals: usize,
    pub nelder_mead: NelderMeadOptions,
}

impl Default for CapletCalibrationOptions {
    fn default() -> Self {
        Self {
            tau_grid: (0.25, 4.0, 0.01),
            fix_tau: false,
            top_k: 4,
            restarts: 4,
            seed: 20240401,
            grid_evals: 80,
            nelder_mead: NelderMeadOptions {
                max_evals: 1500,
                x_tol: 1e-9,
                f_tol: 1e-12,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapletCalibration {
    pub model: CapletModel,
    pub params: CapletParams,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub model_prices: Vec<f64>,
    /// best objective found on each τ1 grid point (proposed model only)
    pub tau_profile: Vec<(f64, f64)>,
}

/// Proposed-model search coordinates: (ln|b|, c1/|b|, ln σ), b < 0.
fn to_z(p: &CapletParams) -> [f64; 3] {
    let ab = p.b.abs().max(1e-8);
    [ab.ln(), p.c1 / ab, p.sigma.abs().max(1e-12).ln()]
}

/// Search box for |b|. The objective keeps creeping down as |b| and σ grow
/// together, so the box stops the search once the kernel is effectively
/// instantaneous. Past |b| ≈ 1e4 the mean reversion acts within a day and
/// further growth only trades b against σ.
const MAX_ABS_B: f64 = 1e4;
const MIN_ABS_B: f64 = 1e-4;

fn in_box(z: &[f64]) -> bool {
    z[0] <= MAX_ABS_B.ln() && z[0] >= MIN_ABS_B.ln() && z.iter().all(|v| v.is_finite())
}

fn from_z(z: &[f64], tau1: f64) -> CapletParams {
    let ab = z[0].exp();
    CapletParams {
        b: -ab,
        c1: z[1] * ab,
        sigma: z[2].exp(),
        tau1,
    }
}

/// Minimize the relative SSE of `model` on `market` starting from `init`.
pub fn calibrate_caplets(
    market: &CapletMarket,
    model: CapletModel,
    init: CapletParams,
    opts: &CapletCalibrationOptions,
) -> Result<CapletCalibration, FitError> {
    let (params, objective, iterations, converged, tau_profile) = match model {
        CapletModel::Proposed => calibrate_proposed(market, init, opts)?,
        CapletModel::Bachelier | CapletModel::Black => {
            let f = |z: &[f64]| {
                market.rel_sse(
                    model,
                    &CapletParams {
                        sigma: z[0].exp(),
                        ..init
                    },
                )
            };
            let z0 = [init.sigma.abs().max(1e-8).ln()];
            let m = minimize_with_restarts(f, &z0, &[1.0], opts.restarts, opts.seed, &opts.nelder_mead);
            (
                CapletParams {
                    sigma: m.x[0].exp(),
                    ..init
                },
                m.f,
                m.evals,
                m.converged,
                Vec::new(),
            )
        }
        CapletModel::Vasicek => {
            let f = |z: &[f64]| {
                market.rel_sse(
                    model,
                    &CapletParams {
                        b: z[0],
                        sigma: z[1].exp(),
                        ..init
                    },
                )
            };
            let z0 = [init.b, init.sigma.abs().max(1e-8).ln()];
            let half = [init.b.abs().max(0.5), 1.0];
            let m = minimize_with_restarts(f, &z0, &half, opts.restarts, opts.seed, &opts.nelder_mead);
            (
                CapletParams {
                    b: m.x[0],
                    sigma: m.x[1].exp(),
                    ..init
                },
                m.f,
                m.evals,
                m.converged,
                Vec::new(),
            )
        }
    };
    if !objective.is_finite() {
        return Err(FitError::OptimizerDiverged);
    }
    let model_prices = market.model_prices(model, &params)?;
    Ok(CapletCalibration {
        model,
        params,
        objective,
        iterations,
        converged,
        model_prices,
        tau_profile,
    })
}

type ProposedFit = (CapletParams, f64, usize, bool, Vec<(f64, f64)>);

fn calibrate_proposed(market: &CapletMarket, init: CapletParams, opts: &CapletCalibrationOptions) -> Result<ProposedFit, FitError> {
    let objective_at = |tau: f64| {
        move |z: &[f64]| {
            if in_box(z) {
                market.rel_sse(CapletModel::Proposed, &from_z(z, tau))
            } else {
                f64::INFINITY
            }
        }
    };
    let half = [2.0, 1.0, 1.0];
    let step = [0.5, 0.25, 0.25];
    let z_init = to_z(&init);

    if opts.fix_tau {
        let m = minimize_with_restarts(objective_at(init.tau1), &z_init, &half, opts.restarts, opts.seed, &opts.nelder_mead);
        return Ok((from_z(&m.x, init.tau1), m.f, m.evals, m.converged, vec![(init.tau1, m.f)]));
    }

    let (lo, hi, dstep) = opts.tau_grid;
    let n = ((hi - lo) / dstep).round() as usize;
    let mut taus: Vec<f64> = (0..=n).map(|i| lo + i as f64 * dstep).collect();
    if !taus.iter().any(|t| (t - init.tau1).abs() < 1e-12) {
        taus.push(init.tau1);
        taus.sort_by(|a, b| a.total_cmp(b));
    }
    let grid_opts = NelderMeadOptions {
        max_evals: opts.grid_evals,
        ..opts.nelder_mead
    };
    // full restarts at the initial τ, then short warm-started runs sweeping
    // outward from it in both directions
    let start = taus.iter().position(|t| (t - init.tau1).abs() < 1e-12).unwrap();
    let anchor = minimize_with_restarts(objective_at(init.tau1), &z_init, &half, opts.restarts, opts.seed, &opts.nelder_mead);
    let sweep = |idx: Vec<usize>| -> Vec<(usize, Vec<f64>, f64, usize)> {
        let mut z = anchor.x.clone();
        let mut out = Vec::with_capacity(idx.len());
        for i in idx {
            let m = nelder_mead(objective_at(taus[i]), &z, &step, &grid_opts);
            if m.f.is_finite() {
                z = m.x.clone();
            }
            out.push((i, m.x, m.f, m.evals));
        }
        out
    };
    let up: Vec<usize> = (start + 1..taus.len()).collect();
    let down: Vec<usize> = (0..start).rev().collect();
    let (a, b) = rayon::join(|| sweep(up), || sweep(down));
    let mut grid: Vec<(usize, Vec<f64>, f64, usize)> = a.into_iter().chain(b).collect();
    grid.push((start, anchor.x.clone(), anchor.f, anchor.evals));
    grid.sort_by_key(|g| g.0);
    let mut evals: usize = grid.iter().map(|g| g.3).sum();
    let tau_profile: Vec<(f64, f64)> = grid.iter().map(|g| (taus[g.0], g.2)).collect();

    let mut ranked: Vec<&(usize, Vec<f64>, f64, usize)> = grid.iter().filter(|g| g.2.is_finite()).collect();
    ranked.sort_by(|a, b| a.2.total_cmp(&b.2));
    let chosen: Vec<(usize, Vec<f64>)> = ranked.iter().take(opts.top_k).map(|g| (g.0, g.1.clone())).collect();
    let mut refined: Vec<(f64, crate::optim::Minimum)> = chosen
        .par_iter()
        .map(|(i, z)| {
            let tau = taus[*i];
            (tau, minimize_with_restarts(objective_at(tau), z, &half, opts.restarts, opts.seed ^ *i as u64, &opts.nelder_mead))
        })
        .collect();
    evals += refined.iter().map(|r| r.1.evals).sum::<usize>();
    refined.push((init.tau1, anchor));
    let (tau, best) = refined
        .into_iter()
        .min_by(|a, b| a.1.f.total_cmp(&b.1.f))
        .ok_or(FitError::OptimizerDiverged)?;
    // never return something worse than the supplied starting point
    let f_init = market.rel_sse(CapletModel::Proposed, &init);
    if f_init < best.f {
        return Ok((init, f_init, evals, false, tau_profile));
    }
    Ok((from_z(&best.x, tau), best.f, evals, best.converged, tau_profile))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bonds::bond_prices;
    use approx::assert_relative_eq;

    #[test]
    fn flat_and_linear_forwards() {
        let m: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let flat = YieldCurve::new(m.clone(), vec![0.05; 10], Interpolation::MonotoneCubic).unwrap();
        for s in [0.3, 1.0, 4.5, 10.0] {
            assert_relative_eq!(flat.market_forward(s).unwrap(), 0.05, max_relative = 1e-14);
        }
        let lin = YieldCurve::new(m.clone(), m.iter().map(|s| 0.04 + 0.002 * s).collect(), Interpolation::MonotoneCubic).unwrap();
        for s in [1.5, 3.3, 7.9] {
            assert_relative_eq!(lin.market_forward(s).unwrap(), 0.04 + 0.004 * s, max_relative = 1e-12);
        }
        assert!(matches!(lin.market_forward(10.5), Err(FitError::OutOfRange { .. })));
    }

    #[test]
    fn log_linear_extrapolates_flat_forward() {
        let c = YieldCurve::new(vec![1.0, 2.0], vec![0.05, 0.06], Interpolation::LogLinear).unwrap();
        assert_relative_eq!(c.discount(1.5).unwrap(), (-0.05f64 * 1.0 - 0.07 * 0.5).exp(), max_relative = 1e-14);
        assert_relative_eq!(c.discount(3.0).unwrap(), (-0.12f64 - 0.07).exp(), max_relative = 1e-14);
        assert_relative_eq!(c.market_forward(2.5).unwrap(), 0.07, max_relative = 1e-14);
    }

    #[test]
    fn nelson_siegel_recovers_its_own_curve() {
        let p = NssParams {
            beta: [0.05, 0.004, -0.03, 0.0],
            lambda: [2.5, 2.5],
        };
        let m: Vec<f64> = vec![0.1, 0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0];
        let y: Vec<f64> = m.iter().map(|&s| p.yield_at(s)).collect();
        let c = YieldCurve::new(m, y, Interpolation::NelsonSiegel).unwrap();
        let fit = c.nss_params().unwrap();
        assert!((fit.lambda[0] - 2.5).abs() < 1e-6, "{fit:?}");
        for s in [0.05, 1.0, 6.0, 14.0] {
            assert!((c.market_forward(s).unwrap() - p.forward(s)).abs() < 1e-9);
        }
    }

    #[test]
    fn nss_recovers_its_own_curve() {
        let p = NssParams {
            beta: [0.04, -0.01, 0.02, 0.01],
            lambda: [1.5, 9.0],
        };
        let m: Vec<f64> = vec![0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0, 20.0, 30.0];
        let y: Vec<f64> = m.iter().map(|&s| p.yield_at(s)).collect();
        let c = YieldCurve::new(m, y, Interpolation::Nss).unwrap();
        for s in [0.1, 1.0, 6.0, 25.0] {
            assert!((c.yield_at(s).unwrap() - p.yield_at(s)).abs() < 1e-9);
        }
        // forward slope against a difference quotient
        let e = 1e-5;
        let fd = (p.forward(2.0 + e) - p.forward(2.0 - e)) / (2.0 * e);
        assert!((p.forward_slope(2.0) - fd).abs() < 1e-8);
    }

    #[test]
    fn flat_curve_phi() {
        let (b, c1, r) = (-1.0, -0.2, 0.05);
        let a = -b * r - c1 * r;
        let model = ModelParams::constant(a, b, vec![c1], vec![1.0], 1e-14).unwrap();
        let m: Vec<f64> = (1..=5).map(|i| i as f64).collect();
        let curve = YieldCurve::new(m, vec![r; 5], Interpolation::MonotoneCubic).unwrap();
        let ip = implied_phi(&curve, &model, 16).unwrap();
        for v in ip.phi.values() {
            assert_relative_eq!(*v, r, max_relative = 1e-12);
        }
        assert!(ip.consistency_residual.abs() < 1e-12);
        let zero = ModelParams::constant(a, b, vec![0.0], vec![1.0], 0.01).unwrap();
        assert_eq!(implied_phi(&curve, &zero, 16).unwrap_err(), FitError::DegenerateC);
        let long = ModelParams::constant(a, b, vec![c1], vec![6.0], 0.01).unwrap();
        assert!(matches!(implied_phi(&curve, &long, 16), Err(FitError::CurveTooShort { .. })));
    }

    #[test]
    fn fast_bond_curve_matches_general_pricer() {
        let p = NssParams {
            beta: [0.045, 0.01, -0.01, 0.02],
            lambda: [2.0, 10.0],
        };
        let curve = YieldCurve::from_nss(p, (1..=10).map(|i| i as f64).collect()).unwrap();
        let model = ModelParams::constant(0.05, -1.0, vec![-0.2], vec![1.0], 0.005).unwrap();
        let mats = [0.5, 1.0, 2.0, 3.5, 7.0];
        let fast = bond_model_prices(&curve, &model, &mats).unwrap();
        // same φ on both sides; r0 is set to φ(0) so the sampled path has no jump in its last cell
        let ip = implied_phi(&curve, &model, 4096).unwrap();
        let phi0 = *ip.phi.values().last().unwrap();
        let hist = ip.phi.to_history(phi0);
        let slow = bond_prices(&model, &hist, 0.0, &mats).unwrap();
        let same = bond_curve_with_phi(&model, &|s| implied_phi_value(&curve, &model, s).unwrap(), phi0, &mats).unwrap();
        for (f, s) in same.iter().zip(&slow) {
            assert!((f - s).abs() < 1e-9, "{f} vs {s}");
        }
        assert!(fast.iter().all(|p| p.is_finite() && *p > 0.0 && *p < 1.0));
        // replication up to τ1
        for &t in &[0.25, 0.5, 1.0] {
            let i = mats.iter().position(|m| *m == t);
            let got = bond_model_prices(&curve, &model, &[t]).unwrap()[0];
            assert!((got - curve.discount(t).unwrap()).abs() < 1e-10, "T={t} {i:?}");
        }
    }

    #[test]
    fn bond_round_trip() {
        let p = NssParams {
            beta: [0.045, 0.01, -0.01, 0.02],
            lambda: [2.0, 10.0],
        };
        let curve = YieldCurve::from_nss(p, (1..=10).map(|i| i as f64).collect()).unwrap();
        let truth = ModelParams::constant(0.05, -0.9, vec![-0.25], vec![1.0], 0.006).unwrap();
        let mats: Vec<f64> = (2..=10).map(|i| i as f64).collect();
        let prices = bond_model_prices(&curve, &truth, &mats).unwrap();
        let quotes: Vec<MarketBond> = mats.iter().zip(&prices).map(|(&maturity, &price)| MarketBond { maturity, price }).collect();
        let init = ModelParams::constant(0.045, -1.0, vec![-0.2], vec![1.0], 0.005).unwrap();
        let opts = CalibrationOptions {
            nelder_mead: NelderMeadOptions { max_evals: 6000, x_tol: 1e-12, f_tol: 1e-14 },
            ..Default::default()
        };
        let r = calibrate_bonds(&curve, Some(&quotes), 1.0, &init, &opts).unwrap();
        assert!(r.objective < 1e-12, "{}", r.objective);
    }

    #[test]
    fn single_quote_exact_fit() {
        let curve = YieldCurve::new(vec![1.0, 2.0, 3.0], vec![0.04, 0.042, 0.043], Interpolation::LogLinear).unwrap();
        let q = CapletQuote::new(2.0, 0.25, 0.04, 0.2, crate::rfr_caplets::CapletStyle::ForwardLooking).unwrap();
        let m = CapletMarket::new(vec![q], &curve, 100.0).unwrap();
        let init = CapletParams { b: -1.0, c1: 0.0, sigma: 0.01, tau1: 1.0 };
        let r = calibrate_caplets(&m, CapletModel::Bachelier, init, &CapletCalibrationOptions::default()).unwrap();
        assert!(r.objective < 1e-14, "{}", r.objective);
    }

    #[test]
    fn objective_is_order_invariant() {
        let curve = YieldCurve::new(vec![1.0, 2.0, 3.0], vec![0.04, 0.042, 0.043], Interpolation::LogLinear).unwrap();
        let mk = |t, k, p| CapletQuote::new(t, 0.25, k, p, crate::rfr_caplets::CapletStyle::ForwardLooking).unwrap();
        let qs = vec![mk(1.0, 0.04, 0.1), mk(2.0, 0.035, 0.3), mk(2.0, 0.05, 0.05)];
        let mut rev = qs.clone();
        rev.reverse();
        let p = CapletParams { b: -2.0, c1: -0.5, sigma: 0.02, tau1: 0.7 };
        let a = CapletMarket::new(qs, &curve, 100.0).unwrap().rel_sse(CapletModel::Proposed, &p);
        let b = CapletMarket::new(rev, &curve, 100.0).unwrap().rel_sse(CapletModel::Proposed, &p);
        assert_relative_eq!(a, b, max_relative = 1e-15);
    }
}
