//! Risk-free-rate caplets: extended bonds, backward-looking rates, the caplet
//! formula, exact simulation of the bond ratio Y and benchmark pricers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Continuous, Normal};
use thiserror::Error;

use crate::bonds::bond_price;
use crate::quad;
use crate::series_kernel::{DelayCoefficients, Kernel, KernelError};
use crate::shortrate::{ModelParams, PathSample, ShortRateError};
use crate::termfn::PiecewiseConstant;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CapletError {
    #[error(transparent)]
    ShortRate(#[from] ShortRateError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("realized path ends at {have}, needed up to {need}")]
    MissingRealizedPath { need: f64, have: f64 },
    #[error("strike factor 1 + K*delta = {0} is not positive")]
    InvalidStrike(f64),
    #[error("negative caplet variance {0}")]
    NegativeVariance(f64),
    #[error("Black pricing needs a positive forward, got {0}")]
    NegativeForward(f64),
    #[error("invalid quote: {0}")]
    InvalidQuote(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CapletStyle {
    ForwardLooking,
    BackwardLooking,
}

/// A caplet on the rate compounded over [S, T].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapletQuote {
    pub s: f64,
    pub t: f64,
    pub delta: f64,
    pub strike: f64,
    pub price: f64,
    pub style: CapletStyle,
}

impl CapletQuote {
    /// Quote with accrual end `t`, start `t − delta`.
    pub fn new(t: f64, delta: f64, strike: f64, price: f64, style: CapletStyle) -> Result<Self, CapletError> {
        let q = Self {
            s: t - delta,
            t,
            delta,
            strike,
            price,
            style,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), CapletError> {
        if !(self.delta > 0.0) || !(self.s >= 0.0) || !(self.t > self.s) {
            return Err(CapletError::InvalidQuote(format!(
                "need T > S >= 0 and delta > 0, got S = {}, T = {}, delta = {}",
                self.s, self.t, self.delta
            )));
        }
        if !(self.khat() > 0.0) {
            return Err(CapletError::InvalidStrike(self.khat()));
        }
        Ok(())
    }

    pub fn khat(&self) -> f64 {
        1.0 + self.strike * self.delta
    }

    /// ℓ = S for forward-looking, ℓ = T for backward-looking caplets.
    pub fn fixing(&self) -> f64 {
        match self.style {
            CapletStyle::ForwardLooking => self.s,
            CapletStyle::BackwardLooking => self.t,
        }
    }
}

/// Bond ratio Y = B*(t,S)/B*(t,T) and the rate R = (Y − 1)/Δ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateState {
    pub y: f64,
    pub r: f64,
}

/// B*(t, T): the bond price before T and the money-market accrual M(t)/M(T) after.
pub fn extended_bond(model: &ModelParams, path: &PathSample, t: f64, maturity: f64) -> Result<f64, CapletError> {
    if t <= maturity {
        return Ok(bond_price(model, path, t, maturity)?);
    }
    if path.end() < t - 1e-9 * path.dt {
        return Err(CapletError::MissingRealizedPath {
            need: t,
            have: path.end(),
        });
    }
    if path.start > maturity + 1e-9 * path.dt {
        return Err(CapletError::MissingRealizedPath {
            need: maturity,
            have: path.start,
        });
    }
    Ok(path.trapezoid(maturity, t).exp())
}

pub fn backward_rate(model: &ModelParams, path: &PathSample, t: f64, quote: &CapletQuote) -> Result<RateState, CapletError> {
    let y = extended_bond(model, path, t, quote.s)? / extended_bond(model, path, t, quote.t)?;
    Ok(RateState {
        y,
        r: (y - 1.0) / quote.delta,
    })
}

/// I(T−u) − I(S−u), i.e. D(S−u) − D(T−u) for the bond exponent.
fn exposure(kernel: &Kernel, s: f64, t: f64, u: f64) -> Result<f64, KernelError> {
    Ok(kernel.i(t - u)? - kernel.i(s - u)?)
}

/// Panel edges on [lo, hi] for integrands in D(S−u), D(T−u) and σ(u).
fn exposure_panels(kernel: &Kernel, sigma: &PiecewiseConstant, s: f64, t: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut kinks = vec![s];
    for m in kernel.terms() {
        kinks.push(s - m.lag);
        kinks.push(t - m.lag);
    }
    kinks.extend_from_slice(sigma.breaks());
    quad::panels(lo, hi, &kinks, kernel.coeffs().b)
}

/// ν(t, ℓ) = ∫_t^ℓ σ²(u) (D(S−u) − D(T−u))² du.
pub fn caplet_variance_nu(model: &ModelParams, t: f64, ell: f64, quote: &CapletQuote) -> Result<f64, CapletError> {
    if !(ell >= t) {
        return Err(CapletError::InvalidQuote(format!("need t <= ell, got t = {t}, ell = {ell}")));
    }
    if ell == t || quote.t == quote.s {
        return Ok(0.0);
    }
    let kernel = model.kernel((quote.t - t).max(0.0))?;
    nu_with(&kernel, &model.sigma, t, ell, quote.s, quote.t)
}

pub(crate) fn nu_with(
    kernel: &Kernel,
    sigma: &PiecewiseConstant,
    t: f64,
    ell: f64,
    s: f64,
    big_t: f64,
) -> Result<f64, CapletError> {
    let lo = t;
    let hi = ell.min(big_t);
    if hi <= lo {
        return Ok(0.0);
    }
    let edges = exposure_panels(kernel, sigma, s, big_t, lo, hi);
    let mut err = None;
    let v = quad::integrate_panels(&edges, |u| {
        let sg = sigma.eval(u);
        match exposure(kernel, s, big_t, u) {
            Ok(g) => sg * sg * g * g,
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    if v < 0.0 {
        return Err(CapletError::NegativeVariance(v));
    }
    Ok(v)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// B(t,T) E[(Y(ℓ) − K̂)⁺] for lognormal Y with total variance ν.
pub fn black_type_price(discount: f64, y: f64, khat: f64, nu: f64) -> Result<f64, CapletError> {
    if !(khat > 0.0) {
        return Err(CapletError::InvalidStrike(khat));
    }
    if nu < 0.0 {
        return Err(CapletError::NegativeVariance(nu));
    }
    if nu == 0.0 {
        return Ok(discount * (y - khat).max(0.0));
    }
    let sd = nu.sqrt();
    let dp = ((y / khat).ln() + 0.5 * nu) / sd;
    let n = std_normal();
    Ok(discount * (y * n.cdf(dp) - khat * n.cdf(dp - sd)))
}

/// Caplet value at t with fixing ℓ, using the model's own bonds for B(t,T) and Y(t).
pub fn caplet_price(
    model: &ModelParams,
    history: &PathSample,
    t: f64,
    quote: &CapletQuote,
    ell: f64,
) -> Result<f64, CapletError> {
    if !(quote.khat() > 0.0) {
        return Err(CapletError::InvalidStrike(quote.khat()));
    }
    if !(ell >= quote.s && ell <= quote.t && ell >= t) {
        return Err(CapletError::InvalidQuote(format!(
            "need max(t, S) <= ell <= T, got t = {t}, ell = {ell}"
        )));
    }
    let state = backward_rate(model, history, t, quote)?;
    let discount = extended_bond(model, history, t, quote.t)?;
    let nu = caplet_variance_nu(model, t, ell, quote)?;
    black_type_price(discount, state.y, quote.khat(), nu)
}

/// Draws of Y(ℓ) = Y(t) exp(−ν/2 + √ν Z) under the extended T-forward measure.
pub fn simulate_y_exact(
    model: &ModelParams,
    quote: &CapletQuote,
    y_t: f64,
    t: f64,
    ell: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>, CapletError> {
    let nu = caplet_variance_nu(model, t, ell, quote)?;
    let sd = nu.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            y_t * (-0.5 * nu + sd * z).exp()
        })
        .collect())
}

/// g(u) = σ(u)(D(S−u) − D(T−u)) on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    pub u: Vec<f64>,
    pub g: Vec<f64>,
    /// every delay coefficient is non-negative and σ is constant, so |g| decays on [S, T]
    pub decay_guaranteed: bool,
}

pub fn volatility_decay_profile(model: &ModelParams, quote: &CapletQuote, grid: &[f64]) -> Result<DecayProfile, CapletError> {
    let kernel = model.kernel(quote.t.max(0.0))?;
    let mut g = Vec::with_capacity(grid.len());
    for &u in grid {
        if u >= quote.t {
            g.push(0.0);
            continue;
        }
        // D(x) = −I(x), so D(S−u) − D(T−u) = I(T−u) − I(S−u)
        let x = kernel.i(quote.t - u)? - kernel.i(quote.s - u)?;
        g.push(model.sigma.eval(u) * x);
    }
    let decay_guaranteed = model.sigma.as_constant().is_some() && model.coeffs.c.iter().all(|c| *c >= 0.0);
    Ok(DecayProfile {
        u: grid.to_vec(),
        g,
        decay_guaranteed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkKind {
    Bachelier,
    Black,
    Vasicek,
}

/// Flat volatility, plus the mean-reversion b for Vasiček.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkParams {
    pub sigma: f64,
    #[serde(default)]
    pub b: f64,
}

/// Benchmark caplet value at t for a forward-looking quote.
///
/// `discount` is B(t,T) and `y` the ratio B(t,S)/B(t,T), so the simple forward is (y − 1)/Δ.
pub fn benchmark_price(
    kind: BenchmarkKind,
    params: BenchmarkParams,
    quote: &CapletQuote,
    t: f64,
    discount: f64,
    y: f64,
) -> Result<f64, CapletError> {
    if !(discount > 0.0) {
        return Err(CapletError::InvalidQuote("discount must be positive".into()));
    }
    let fwd = (y - 1.0) / quote.delta;
    let k = quote.strike;
    let expiry = (quote.s - t).max(0.0);
    let sd = params.sigma.abs() * expiry.sqrt();
    let n = std_normal();
    let scale = discount * quote.delta;
    match kind {
        BenchmarkKind::Bachelier => {
            if sd == 0.0 {
                return Ok(scale * (fwd - k).max(0.0));
            }
            let d = (fwd - k) / sd;
            Ok(scale * ((fwd - k) * n.cdf(d) + sd * n.pdf(d)))
        }
        BenchmarkKind::Black => {
            if !(fwd > 0.0) {
                return Err(CapletError::NegativeForward(fwd));
            }
            if sd == 0.0 || k <= 0.0 {
                return Ok(scale * (fwd - k).max(0.0));
            }
            let d1 = ((fwd / k).ln() + 0.5 * sd * sd) / sd;
            Ok(scale * (fwd * n.cdf(d1) - k * n.cdf(d1 - sd)))
        }
        BenchmarkKind::Vasicek => {
            let model = vasicek_model(params)?;
            let nu = caplet_variance_nu(&model, t, quote.s.max(t), quote)?;
            black_type_price(discount, y, quote.khat(), nu)
        }
    }
}

/// The c = 0 model behind the Vasiček benchmark; a does not enter caplet prices.
pub fn vasicek_model(params: BenchmarkParams) -> Result<ModelParams, CapletError> {
    Ok(ModelParams {
        coeffs: DelayCoefficients::new(params.b, vec![0.0], vec![1.0])?,
        a: PiecewiseConstant::constant(0.0),
        sigma: PiecewiseConstant::constant(params.sigma.abs()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table1() -> ModelParams {
        ModelParams::constant(0.05219, -1.00232, vec![-0.14587], vec![1.0], 0.00402).unwrap()
    }

    fn quote(t: f64, k: f64) -> CapletQuote {
        CapletQuote::new(t, 0.25, k, 0.0, CapletStyle::ForwardLooking).unwrap()
    }

    #[test]
    fn extended_bond_branches() {
        let m = table1();
        let p = PathSample::flat(3.0, 4.0, 1.0 / 64.0, 0.05);
        assert_relative_eq!(extended_bond(&m, &p, 3.0, 2.0).unwrap(), 0.05f64.exp(), max_relative = 1e-12);
        assert_eq!(extended_bond(&m, &p, 2.0, 2.0).unwrap(), 1.0);
        let short = PathSample::flat(2.5, 2.0, 1.0 / 64.0, 0.05);
        assert!(matches!(
            extended_bond(&m, &short, 3.0, 2.0),
            Err(CapletError::MissingRealizedPath { .. })
        ));
    }

    #[test]
    fn realized_backward_rate() {
        let m = table1();
        let q = quote(2.0, 0.0);
        let rho = 0.04;
        let p = PathSample::flat(2.0, 3.0, 1.0 / 64.0, rho);
        let st = backward_rate(&m, &p, 2.0, &q).unwrap();
        assert_relative_eq!(st.r, ((rho * 0.25f64).exp() - 1.0) / 0.25, max_relative = 1e-12);
        let z = PathSample::flat(2.0, 3.0, 1.0 / 64.0, 0.0);
        assert_eq!(backward_rate(&m, &z, 2.0, &q).unwrap().r, 0.0);
    }

    #[test]
    fn vasicek_nu_closed_form() {
        let (b, s) = (-0.7, 0.012);
        let m = vasicek_model(BenchmarkParams { sigma: s, b }).unwrap();
        let q = quote(2.0, 0.03);
        let got = caplet_variance_nu(&m, 0.0, q.s, &q).unwrap();
        let f = ((b * 0.25f64).exp() - 1.0) / b;
        let want = s * s * f * f * ((2.0 * b * q.s).exp() - 1.0) / (2.0 * b);
        assert_relative_eq!(got, want, max_relative = 1e-10);
        // after S only the tail of the accrual period contributes
        let tail = caplet_variance_nu(&m, q.s, q.t, &q).unwrap();
        let exact = {
            // ∫_0^Δ ((e^{bx} − 1)/b)² dx
            let d = 0.25f64;
            s * s / (b * b) * (((2.0 * b * d).exp() - 1.0) / (2.0 * b) - 2.0 * ((b * d).exp() - 1.0) / b + d)
        };
        assert_relative_eq!(tail, exact, max_relative = 1e-10);
    }

    #[test]
    fn degenerate_variance() {
        let m = table1();
        let mut q = quote(2.0, 0.03);
        assert_eq!(caplet_variance_nu(&m, 1.0, 1.0, &q).unwrap(), 0.0);
        q.s = q.t;
        assert_eq!(caplet_variance_nu(&m, 0.0, 1.5, &q).unwrap(), 0.0);
    }

    #[test]
    fn nu_is_additive() {
        let m = table1();
        let q = quote(3.0, 0.03);
        let whole = caplet_variance_nu(&m, 0.0, q.t, &q).unwrap();
        let a = caplet_variance_nu(&m, 0.0, 1.3, &q).unwrap();
        let b = caplet_variance_nu(&m, 1.3, q.t, &q).unwrap();
        assert_relative_eq!(whole, a + b, max_relative = 1e-12);
    }

    #[test]
    fn black_type_limits() {
        assert_eq!(black_type_price(0.9, 1.02, 1.01, 0.0).unwrap(), 0.9 * (1.02f64 - 1.01));
        let near = black_type_price(0.9, 1.02, 1.01, 1e-18).unwrap();
        assert_relative_eq!(near, 0.9 * (1.02f64 - 1.01), max_relative = 1e-9);
        let p = black_type_price(0.9, 1.02, 1e-12, 0.01).unwrap();
        assert_relative_eq!(p, 0.9 * 1.02, max_relative = 1e-9);
        assert!(matches!(black_type_price(0.9, 1.02, -0.1, 0.01), Err(CapletError::InvalidStrike(_))));
    }

    #[test]
    fn bachelier_at_the_money() {
        let q = quote(2.0, 0.04);
        let y = 1.0 + 0.04 * 0.25;
        let s = 0.01;
        let p = benchmark_price(BenchmarkKind::Bachelier, BenchmarkParams { sigma: s, b: 0.0 }, &q, 0.0, 0.95, y).unwrap();
        let want = 0.95 * 0.25 * s * q.s.sqrt() / (2.0 * std::f64::consts::PI).sqrt();
        assert_relative_eq!(p, want, max_relative = 1e-14);
    }

    #[test]
    fn zero_vol_benchmarks_are_intrinsic() {
        let q = quote(2.0, 0.03);
        let y = 1.0 + 0.04 * 0.25;
        let intrinsic = 0.95 * (y - q.khat());
        for kind in [BenchmarkKind::Bachelier, BenchmarkKind::Black, BenchmarkKind::Vasicek] {
            let p = benchmark_price(kind, BenchmarkParams { sigma: 0.0, b: -0.5 }, &q, 0.0, 0.95, y).unwrap();
            assert_relative_eq!(p, intrinsic, max_relative = 1e-12);
        }
        let neg = benchmark_price(BenchmarkKind::Black, BenchmarkParams { sigma: 0.2, b: 0.0 }, &q, 0.0, 0.95, 0.99);
        assert!(matches!(neg, Err(CapletError::NegativeForward(_))));
    }

    #[test]
    fn vasicek_benchmark_is_caplet_formula() {
        let params = BenchmarkParams { sigma: 0.011, b: -0.3 };
        let m = vasicek_model(params).unwrap();
        let h = PathSample::flat(0.0, 1.0, 1.0 / 64.0, 0.04);
        let q = quote(2.0, 0.035);
        let via_model = caplet_price(&m, &h, 0.0, &q, q.s).unwrap();
        let st = backward_rate(&m, &h, 0.0, &q).unwrap();
        let disc = bond_price(&m, &h, 0.0, q.t).unwrap();
        let bench = benchmark_price(BenchmarkKind::Vasicek, params, &q, 0.0, disc, st.y).unwrap();
        assert!((via_model - bench).abs() <= 1e-12 * via_model.abs().max(1e-300));
    }

    #[test]
    fn decay_profile() {
        let q = quote(2.0, 0.03);
        let grid: Vec<f64> = (0..=30).map(|i| i as f64 * 0.1).collect();
        let p = volatility_decay_profile(&table1(), &q, &grid).unwrap();
        assert!(!p.decay_guaranteed);
        for (u, g) in p.u.iter().zip(&p.g) {
            if *u >= q.t {
                assert_eq!(*g, 0.0);
            }
        }
        let pos = ModelParams::constant(0.05, -1.0, vec![0.3], vec![0.5], 0.01).unwrap();
        let fine: Vec<f64> = (0..=100).map(|i| q.s + i as f64 * 0.0025).collect();
        let p = volatility_decay_profile(&pos, &q, &fine).unwrap();
        assert!(p.decay_guaranteed);
        assert!(p.g.windows(2).all(|w| w[1].abs() <= w[0].abs()));
    }

    #[test]
    fn psi_factorisation_reproduces_r() {
        // discretised Y path against the ψ representation of the backward rate
        let m = ModelParams::constant(0.05, -1.0, vec![-0.2], vec![0.5], 0.05).unwrap();
        let q = quote(1.5, 0.03);
        let k = m.kernel(q.t).unwrap();
        let n = 20_000;
        let h = q.t / n as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y0: f64 = 1.01;
        let (mut logy, mut int_dt, mut int_dw) = (y0.ln(), 0.0, 0.0);
        let (mut lpsi, mut psi) = (0.0f64, 1.0f64);
        for i in 0..n {
            let u = i as f64 * h;
            let g = m.sigma.eval(u) * exposure(&k, q.s, q.t, u).unwrap();
            let dw: f64 = StandardNormal.sample(&mut rng);
            let dw = dw * h.sqrt();
            int_dt += g * g / (q.delta * psi) * h;
            int_dw += g / (q.delta * psi) * dw;
            logy += -0.5 * g * g * h + g * dw;
            lpsi += -0.5 * g * g * h + g * dw;
            psi = lpsi.exp();
        }
        let r_direct = (logy.exp() - 1.0) / q.delta;
        let r_psi = (y0 - 1.0) / q.delta * psi - psi * int_dt + psi * int_dw;
        assert!((r_direct - r_psi).abs() < 1e-4, "{r_direct} vs {r_psi}");
    }
}
