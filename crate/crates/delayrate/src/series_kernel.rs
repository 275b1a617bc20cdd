//! Fundamental solution R(t), its integral I(t) and the affine exponents D(ℓ), A(ℓ).
//!
//! R is a finite sum over multi-indices α ∈ ℕᴺ with ⟨α,τ⟩ ≤ t:
//!
//! ```text
//! R(t) = Σ_α  c^α/α! · (t − ⟨α,τ⟩)^|α| · e^{b (t − ⟨α,τ⟩)}
//! ```
//!
//! and the transform exponent solving `D' = bD + Σ c_j D(·−τ_j) + d1`, `D(0) = z`,
//! `D = 0` on the negative axis, is `D(ℓ) = z R(ℓ) + d1 I(ℓ)` with `I(ℓ) = ∫₀^ℓ R`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad;
use crate::termfn::PiecewiseConstant;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("delay coefficients: {0}")]
    InvalidCoefficients(String),
    #[error("series term overflow at order {order}, alpha {alpha:?}")]
    SeriesOverflow { order: u32, alpha: Vec<u32> },
    #[error("series needs order {needed} at t = {t}, above max_order {max_order}")]
    MaxOrderExceeded { needed: u32, max_order: u32, t: f64 },
    #[error("evaluation at t = {t} beyond kernel horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },
    #[error("quadrature did not converge: estimate {estimate}, error {error}")]
    QuadratureNonConvergence { estimate: f64, error: f64 },
    #[error("oracle step {step} exceeds tau_1/8 = {limit}")]
    StepTooLarge { step: f64, limit: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Drift slope b, delay coefficients c_j and delays τ_j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayCoefficients {
    pub b: f64,
    pub c: Vec<f64>,
    pub tau: Vec<f64>,
}

impl DelayCoefficients {
    pub fn new(b: f64, c: Vec<f64>, tau: Vec<f64>) -> Result<Self, KernelError> {
        let s = Self { b, c, tau };
        s.validate()?;
        Ok(s)
    }

    /// Single-delay coefficients with c₁ = 0, i.e. the Vasiček drift.
    pub fn vasicek(b: f64) -> Self {
        Self {
            b,
            c: vec![0.0],
            tau: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let bad = |m: &str| Err(KernelError::InvalidCoefficients(m.to_string()));
        if self.c.is_empty() {
            return bad("at least one delay is required");
        }
        if self.c.len() != self.tau.len() {
            return bad("c and tau must have equal length");
        }
        if !self.b.is_finite() || self.c.iter().any(|x| !x.is_finite()) {
            return bad("non-finite coefficient");
        }
        if self.tau.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return bad("delays must be finite and positive");
        }
        if self.tau.windows(2).any(|w| w[1] <= w[0]) {
            return bad("delays must be strictly increasing");
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn tau1(&self) -> f64 {
        self.tau[0]
    }

    pub fn tau_max(&self) -> f64 {
        *self.tau.last().unwrap()
    }
}

/// One multi-index α with its order |α|, lag ⟨α,τ⟩ and weight c^α/α!.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiIndexTerm {
    pub alpha: Vec<u32>,
    pub order: u32,
    pub lag: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesConfig {
    pub rel_tol: f64,
    pub max_order: u32,
    pub quadrature_nodes: usize,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_order: 64,
            quadrature_nodes: 16,
        }
    }
}

/// All multi-indices with ⟨α,τ⟩ ≤ horizon, sorted by lag.
///
/// Indices through a zero coefficient are skipped since their weight vanishes.
pub fn enumerate_terms(
    coeffs: &DelayCoefficients,
    horizon: f64,
    cfg: &SeriesConfig,
) -> Result<Vec<MultiIndexTerm>, KernelError> {
    coeffs.validate()?;
    let mut out = Vec::new();
    let mut alpha = vec![0u32; coeffs.n()];
    if horizon >= 0.0 {
        walk(coeffs, horizon, cfg, 0, &mut alpha, 0, 0.0, 1.0, &mut out)?;
    }
    out.sort_by(|a, b| {
        a.lag
            .partial_cmp(&b.lag)
            .unwrap()
            .then(a.order.cmp(&b.order))
    });
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    co: &DelayCoefficients,
    horizon: f64,
    cfg: &SeriesConfig,
    j: usize,
    alpha: &mut Vec<u32>,
    order: u32,
    lag: f64,
    weight: f64,
    out: &mut Vec<MultiIndexTerm>,
) -> Result<(), KernelError> {
    if j == co.n() {
        if order > cfg.max_order {
            return Err(KernelError::MaxOrderExceeded {
                needed: order,
                max_order: cfg.max_order,
                t: horizon,
            });
        }
        if !weight.is_finite() {
            return Err(KernelError::SeriesOverflow {
                order,
                alpha: alpha.clone(),
            });
        }
        out.push(MultiIndexTerm {
            alpha: alpha.clone(),
            order,
            lag,
            weight,
        });
        return Ok(());
    }
    let (cj, tj) = (co.c[j], co.tau[j]);
    let mut k = 0u32;
    let mut w = weight;
    loop {
        let l = lag + k as f64 * tj;
        // small slack so that lags landing on the horizon by rounding are kept
        if l > horizon * (1.0 + 1e-14) + 1e-300 {
            break;
        }
        alpha[j] = k;
        walk(co, horizon, cfg, j + 1, alpha, order + k, l, w, out)?;
        if cj == 0.0 {
            break;
        }
        k += 1;
        if order + k > cfg.max_order {
            // any further α is over budget; report only if it would contribute
            if lag + k as f64 * tj <= horizon {
                alpha[j] = 0;
                return Err(KernelError::MaxOrderExceeded {
                    needed: order + k,
                    max_order: cfg.max_order,
                    t: horizon,
                });
            }
            break;
        }
        w *= cj / k as f64;
    }
    alpha[j] = 0;
    Ok(())
}

/// ∫₀^x u^n e^{bu} du, evaluated without cancellation.
///
/// b > 0 and b < 0 with |b|x < n+1 use positive series; otherwise the
/// regularized incomplete-gamma complement n!/|b|^{n+1}·(1 − Poisson(n; |b|x)).
pub fn jn(n: u32, x: f64, b: f64, rel_tol: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let np1 = n as f64 + 1.0;
    if b == 0.0 {
        return x.powi(n as i32 + 1) / np1;
    }
    let lead = x.powi(n as i32 + 1);
    if b > 0.0 {
        let y = b * x;
        let mut term = 1.0; // y^k/k!
        let mut sum = 1.0 / np1;
        let mut k = 0u32;
        loop {
            k += 1;
            term *= y / k as f64;
            let t = term / (np1 + k as f64);
            sum += t;
            if (k as f64 > y && t <= rel_tol * 0.1 * sum) || !sum.is_finite() || k > 100_000 {
                break;
            }
        }
        return lead * sum;
    }
    let xx = -b * x;
    if xx < np1 {
        let mut term = 1.0 / np1;
        let mut sum = term;
        let mut k = 0u32;
        loop {
            k += 1;
            term *= xx / (np1 + k as f64);
            sum += term;
            if term <= rel_tol * 0.1 * sum || k > 10_000 {
                break;
            }
        }
        return lead * (-xx).exp() * sum;
    }
    let ab = -b;
    let mut pref = 1.0 / ab;
    for r in 1..=n {
        pref *= r as f64 / ab;
    }
    let lx = xx.ln();
    let mut poisson = 0.0;
    let mut lfact = 0.0;
    for r in 0..=n {
        if r > 0 {
            lfact += (r as f64).ln();
        }
        poisson += (-xx + r as f64 * lx - lfact).exp();
    }
    pref * (1.0 - poisson)
}

/// Series kernel with the multi-index terms precomputed up to `horizon`.
#[derive(Debug, Clone)]
pub struct Kernel {
    coeffs: DelayCoefficients,
    horizon: f64,
    terms: Vec<MultiIndexTerm>,
    cfg: SeriesConfig,
}

impl Kernel {
    pub fn new(
        coeffs: &DelayCoefficients,
        horizon: f64,
        cfg: SeriesConfig,
    ) -> Result<Self, KernelError> {
        let horizon = horizon.max(0.0);
        let terms = enumerate_terms(coeffs, horizon, &cfg)?;
        Ok(Self {
            coeffs: coeffs.clone(),
            horizon,
            terms,
            cfg,
        })
    }

    pub fn coeffs(&self) -> &DelayCoefficients {
        &self.coeffs
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn config(&self) -> &SeriesConfig {
        &self.cfg
    }

    pub fn terms(&self) -> &[MultiIndexTerm] {
        &self.terms
    }

    fn check(&self, t: f64) -> Result<(), KernelError> {
        if t > self.horizon * (1.0 + 1e-12) + 1e-12 {
            Err(KernelError::BeyondHorizon {
                t,
                horizon: self.horizon,
            })
        } else {
            Ok(())
        }
    }

    /// Lags ⟨α,τ⟩ in (0, t]; the kinks of R, I and D.
    pub fn breakpoints(&self, t: f64) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .terms
            .iter()
            .map(|m| m.lag)
            .filter(|&l| l > 0.0 && l <= t)
            .collect();
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
        v
    }

    /// R(t); zero for t < 0 and exactly one at t = 0.
    pub fn r(&self, t: f64) -> Result<f64, KernelError> {
        if t < 0.0 {
            return Ok(0.0);
        }
        self.check(t)?;
        let b = self.coeffs.b;
        let mut s = 0.0;
        for m in &self.terms {
            if m.lag > t {
                break;
            }
            let x = t - m.lag;
            let mut v = m.weight * x.powi(m.order as i32) * (b * x).exp();
            if !v.is_finite() {
                // log form survives x^n overflowing against a tiny exponential
                let lv = m.weight.abs().ln() + m.order as f64 * x.ln() + b * x;
                v = m.weight.signum() * lv.exp();
                if !v.is_finite() {
                    return Err(KernelError::SeriesOverflow {
                        order: m.order,
                        alpha: m.alpha.clone(),
                    });
                }
            }
            s += v;
        }
        Ok(s)
    }

    /// I(t) = ∫₀^t R(u) du; zero for t ≤ 0.
    pub fn i(&self, t: f64) -> Result<f64, KernelError> {
        if t <= 0.0 {
            return Ok(0.0);
        }
        self.check(t)?;
        let b = self.coeffs.b;
        let mut s = 0.0;
        for m in &self.terms {
            if m.lag >= t {
                break;
            }
            let v = m.weight * jn(m.order, t - m.lag, b, self.cfg.rel_tol);
            if !v.is_finite() {
                return Err(KernelError::SeriesOverflow {
                    order: m.order,
                    alpha: m.alpha.clone(),
                });
            }
            s += v;
        }
        Ok(s)
    }

    /// Bond exponent D(ℓ) for z = 0, d1 = −1, i.e. −I(ℓ).
    pub fn d_bond(&self, ell: f64) -> Result<f64, KernelError> {
        Ok(-self.i(ell)?)
    }

    /// General exponent D(ℓ) = z R(ℓ) + d1 I(ℓ); zero for ℓ < 0.
    pub fn d(&self, ell: f64, z: Complex64, d1: f64) -> Result<Complex64, KernelError> {
        if ell < 0.0 {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let r = if z == Complex64::new(0.0, 0.0) {
            0.0
        } else {
            self.r(ell)?
        };
        let i = if d1 == 0.0 { 0.0 } else { self.i(ell)? };
        Ok(z * r + d1 * i)
    }
}

/// R(t) with a kernel built for this single evaluation.
pub fn eval_r(coeffs: &DelayCoefficients, t: f64) -> Result<f64, KernelError> {
    Kernel::new(coeffs, t, SeriesConfig::default())?.r(t)
}

/// D(ℓ) with a kernel built for this single evaluation.
pub fn eval_d(
    coeffs: &DelayCoefficients,
    ell: f64,
    z: Complex64,
    d1: f64,
) -> Result<Complex64, KernelError> {
    Kernel::new(coeffs, ell, SeriesConfig::default())?.d(ell, z, d1)
}

/// Panel edges on [lo, hi] for integrands built from D(·) and the term structures.
pub(crate) fn kinked_panels(lo: f64, hi: f64, kinks: &[f64], b: f64) -> Vec<f64> {
    quad::panels(lo, hi, kinks, b)
}

/// A(ℓ) = ∫₀^ℓ [a(T−u) D(u) + ½σ²(T−u) D(u)² + d0] du.
#[allow(clippy::too_many_arguments)]
pub fn eval_a(
    kernel: &Kernel,
    a: &PiecewiseConstant,
    sigma: &PiecewiseConstant,
    maturity: f64,
    ell: f64,
    z: Complex64,
    d0: f64,
    d1: f64,
) -> Result<Complex64, KernelError> {
    if !(ell >= 0.0) || ell > maturity + 1e-12 {
        return Err(KernelError::InvalidArgument(format!(
            "need 0 <= ell <= T, got ell = {ell}, T = {maturity}"
        )));
    }
    if ell == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let mut kinks = kernel.breakpoints(ell);
    for &x in a.breaks().iter().chain(sigma.breaks()) {
        kinks.push(maturity - x);
    }
    let edges = kinked_panels(0.0, ell, &kinks, kernel.coeffs().b);
    let mut err = None;
    let mut integrand = |u: f64, part: usize| -> f64 {
        let d = match kernel.d(u, z, d1) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                return 0.0;
            }
        };
        let s = sigma.eval(maturity - u);
        let v = a.eval(maturity - u) * d + 0.5 * s * s * d * d + d0;
        if part == 0 {
            v.re
        } else {
            v.im
        }
    };
    let (re, dre, sre) = quad::integrate_checked(&edges, |u| integrand(u, 0));
    let (im, dim, sim) = if z.im != 0.0 {
        quad::integrate_checked(&edges, |u| integrand(u, 1))
    } else {
        (0.0, 0.0, 0.0)
    };
    if let Some(e) = err {
        return Err(e);
    }
    let tol = kernel.config().rel_tol.max(64.0 * f64::EPSILON);
    for (v, d, s) in [(re, dre, sre), (im, dim, sim)] {
        if d > tol * s.max(f64::MIN_POSITIVE) && d > 1e-300 {
            return Err(KernelError::QuadratureNonConvergence {
                estimate: v,
                error: d,
            });
        }
    }
    Ok(Complex64::new(re, im))
}

/// Dense RK4 solution of x' = b x + Σ c_j x(t−τ_j) + d1 on a uniform grid.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub step: f64,
    pub x: Vec<f64>,
    /// right derivative at the start of each cell
    pub d_start: Vec<f64>,
    /// left derivative at the end of each cell
    pub d_end: Vec<f64>,
    /// largest |k_j·step − τ_j| after snapping delays to the grid
    pub snap_error: f64,
}

impl OracleSolution {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.x.len()).map(move |i| i as f64 * self.step)
    }

    /// Cubic Hermite interpolation inside the containing cell.
    pub fn eval(&self, t: f64) -> f64 {
        let h = self.step;
        let n = self.x.len() - 1;
        if t <= 0.0 {
            return self.x[0];
        }
        let mut m = (t / h).floor() as usize;
        if m >= n {
            m = n - 1;
        }
        hermite(
            self.x[m],
            self.x[m + 1],
            self.d_start[m],
            self.d_end[m],
            h,
            (t - m as f64 * h) / h,
        )
    }
}

fn hermite(x0: f64, x1: f64, d0: f64, d1: f64, h: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * x0
        + (s3 - 2.0 * s2 + s) * h * d0
        + (-2.0 * s3 + 3.0 * s2) * x1
        + (s3 - s2) * h * d1
}

/// Method-of-steps RK4 oracle. `history` gives the initial function on the
/// negative axis (at 0 it is read as the left limit), `x0` the value at 0.
pub fn dde_oracle(
    coeffs: &DelayCoefficients,
    history: &dyn Fn(f64) -> f64,
    x0: f64,
    d1: f64,
    t_max: f64,
    step: f64,
) -> Result<OracleSolution, KernelError> {
    coeffs.validate()?;
    let limit = coeffs.tau1() / 8.0;
    if !(step > 0.0) || step > limit * (1.0 + 1e-12) {
        return Err(KernelError::StepTooLarge { step, limit });
    }
    let n = (t_max / step).ceil().max(1.0) as usize;
    let k: Vec<usize> = coeffs
        .tau
        .iter()
        .map(|t| (t / step).round() as usize)
        .collect();
    let snap_error = coeffs
        .tau
        .iter()
        .zip(&k)
        .map(|(t, &kj)| (kj as f64 * step - t).abs())
        .fold(0.0, f64::max);
    let mut x = Vec::with_capacity(n + 1);
    let mut ds = Vec::with_capacity(n);
    let mut de = Vec::with_capacity(n);
    x.push(x0);
    let b = coeffs.b;
    // delayed value for cell m at fraction s ∈ [0,1]
    let delayed = |x: &[f64], ds: &[f64], de: &[f64], m: isize, s: f64| -> f64 {
        if m < 0 {
            history((m as f64 + s) * step)
        } else {
            let m = m as usize;
            hermite(x[m], x[m + 1], ds[m], de[m], step, s)
        }
    };
    for i in 0..n {
        let rhs = |xv: f64, s: f64, x: &[f64], ds: &[f64], de: &[f64]| -> f64 {
            let mut v = b * xv + d1;
            for (j, &kj) in k.iter().enumerate() {
                v += coeffs.c[j] * delayed(x, ds, de, i as isize - kj as isize, s);
            }
            v
        };
        let xi = x[i];
        let k1 = rhs(xi, 0.0, &x, &ds, &de);
        let k2 = rhs(xi + 0.5 * step * k1, 0.5, &x, &ds, &de);
        let k3 = rhs(xi + 0.5 * step * k2, 0.5, &x, &ds, &de);
        let k4 = rhs(xi + step * k3, 1.0, &x, &ds, &de);
        let xn = xi + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let dend = rhs(xn, 1.0, &x, &ds, &de);
        x.push(xn);
        ds.push(k1);
        de.push(dend);
    }
    Ok(OracleSolution {
        step,
        x,
        d_start: ds,
        d_end: de,
        snap_error,
    })
}
