//! The delayed short-rate model: parameters, paths, conditional law, simulation,
//! stability, limiting law and the measure-change quantities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad;
use crate::series_kernel::{DelayCoefficients, Kernel, KernelError, SeriesConfig};
use crate::termfn::{PiecewiseConstant, TermError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShortRateError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Term(#[from] TermError),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("history starts at {have}, needs to reach back to {need}")]
    HistoryTooShort { need: f64, have: f64 },
    #[error("invalid time step: {0}")]
    InvalidStep(String),
    #[error("limit not reached by horizon {horizon}")]
    NotConverged { horizon: f64 },
    #[error("models use different delays")]
    DelayMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Coefficients of `dr = (a(t) + b r + Σ c_j r(t−τ_j)) dt + σ(t) dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub coeffs: DelayCoefficients,
    pub a: PiecewiseConstant,
    pub sigma: PiecewiseConstant,
}

impl ModelParams {
    pub fn new(
        coeffs: DelayCoefficients,
        a: PiecewiseConstant,
        sigma: PiecewiseConstant,
    ) -> Result<Self, ShortRateError> {
        let m = Self { coeffs, a, sigma };
        m.validate()?;
        Ok(m)
    }

    /// Constant a and σ.
    pub fn constant(
        a: f64,
        b: f64,
        c: Vec<f64>,
        tau: Vec<f64>,
        sigma: f64,
    ) -> Result<Self, ShortRateError> {
        Self::new(
            DelayCoefficients::new(b, c, tau)?,
            PiecewiseConstant::constant(a),
            PiecewiseConstant::constant(sigma),
        )
    }

    pub fn validate(&self) -> Result<(), ShortRateError> {
        self.coeffs.validate()?;
        if !(self.sigma.min_value() > 0.0) {
            return Err(ShortRateError::InvalidModel("sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn kernel(&self, horizon: f64) -> Result<Kernel, ShortRateError> {
        Ok(Kernel::new(&self.coeffs, horizon, SeriesConfig::default())?)
    }

    pub fn tau_max(&self) -> f64 {
        self.coeffs.tau_max()
    }

    pub fn to_json(&self) -> ModelJson {
        let scalar_or_vec = |f: &PiecewiseConstant| match f.as_constant() {
            Some(v) => ScalarOrVec::Scalar(v),
            None => ScalarOrVec::Vec(f.values().to_vec()),
        };
        let breaks = |f: &PiecewiseConstant| {
            if f.breaks().is_empty() {
                None
            } else {
                Some(f.breaks().to_vec())
            }
        };
        ModelJson {
            a: scalar_or_vec(&self.a),
            b: self.coeffs.b,
            c: self.coeffs.c.clone(),
            tau: self.coeffs.tau.clone(),
            sigma: scalar_or_vec(&self.sigma),
            a_breaks: breaks(&self.a),
            sigma_breaks: breaks(&self.sigma),
        }
    }

    pub fn from_json(j: &ModelJson) -> Result<Self, ShortRateError> {
        let pc = |v: &ScalarOrVec, br: &Option<Vec<f64>>| -> Result<PiecewiseConstant, TermError> {
            match v {
                ScalarOrVec::Scalar(x) => {
                    PiecewiseConstant::new(br.clone().unwrap_or_default(), vec![*x])
                }
                ScalarOrVec::Vec(xs) => {
                    PiecewiseConstant::new(br.clone().unwrap_or_default(), xs.clone())
                }
            }
        };
        Self::new(
            DelayCoefficients::new(j.b, j.c.clone(), j.tau.clone())?,
            pc(&j.a, &j.a_breaks)?,
            pc(&j.sigma, &j.sigma_breaks)?,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vec(Vec<f64>),
}

/// On-disk model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub a: ScalarOrVec,
    pub b: f64,
    pub c: Vec<f64>,
    pub tau: Vec<f64>,
    pub sigma: ScalarOrVec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_breaks: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_breaks: Option<Vec<f64>>,
}

/// φ sampled on a uniform grid over [−τ_N, 0], linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCurve {
    tau_n: f64,
    values: Vec<f64>,
}

impl InitialCurve {
    pub fn new(tau_n: f64, values: Vec<f64>) -> Result<Self, ShortRateError> {
        if !(tau_n > 0.0) || values.len() < 2 {
            return Err(ShortRateError::InvalidArgument(
                "initial curve needs tau_n > 0 and at least two samples".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ShortRateError::InvalidArgument("non-finite initial curve value".into()));
        }
        Ok(Self { tau_n, values })
    }

    pub fn flat(tau_n: f64, value: f64, points: usize) -> Self {
        Self {
            tau_n,
            values: vec![value; points.max(2)],
        }
    }

    pub fn from_fn(tau_n: f64, cells: usize, f: impl Fn(f64) -> f64) -> Result<Self, ShortRateError> {
        let cells = cells.max(1);
        let h = tau_n / cells as f64;
        Self::new(tau_n, (0..=cells).map(|i| f(-tau_n + i as f64 * h)).collect())
    }

    pub fn tau_n(&self) -> f64 {
        self.tau_n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dt(&self) -> f64 {
        self.tau_n / (self.values.len() - 1) as f64
    }

    pub fn grid(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.dt();
        (0..self.values.len()).map(move |i| -self.tau_n + i as f64 * h)
    }

    pub fn eval(&self, s: f64) -> f64 {
        let h = self.dt();
        let x = ((s + self.tau_n) / h).clamp(0.0, (self.values.len() - 1) as f64);
        let i = (x.floor() as usize).min(self.values.len() - 2);
        let th = x - i as f64;
        self.values[i] * (1.0 - th) + self.values[i + 1] * th
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// History path: φ on its grid with r0 at time 0.
    pub fn to_history(&self, r0: f64) -> PathSample {
        let mut v = self.values.clone();
        *v.last_mut().unwrap() = r0;
        PathSample::new(-self.tau_n, self.dt(), 0.0, v, None).expect("valid grid")
    }
}

/// A rate trajectory on a uniform grid; rows before `t0` are pre-history.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub start: f64,
    pub dt: f64,
    pub t0: f64,
    pub values: Vec<f64>,
    pub seed: Option<u64>,
}

impl PathSample {
    pub fn new(
        start: f64,
        dt: f64,
        t0: f64,
        values: Vec<f64>,
        seed: Option<u64>,
    ) -> Result<Self, ShortRateError> {
        if !(dt > 0.0) || values.is_empty() {
            return Err(ShortRateError::InvalidArgument("path needs dt > 0 and values".into()));
        }
        Ok(Self {
            start,
            dt,
            t0,
            values,
            seed,
        })
    }

    /// Constant history `value` on [t − span, t] sampled with step `dt`.
    pub fn flat(t: f64, span: f64, dt: f64, value: f64) -> Self {
        let n = (span / dt).ceil() as usize;
        Self {
            start: t - n as f64 * dt,
            dt,
            t0: t,
            values: vec![value; n + 1],
            seed: None,
        }
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start + i as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.values.len() - 1)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |i| self.time(i))
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let x = ((t - self.start) / self.dt).clamp(0.0, (self.values.len() - 1) as f64);
        if self.values.len() == 1 {
            return self.values[0];
        }
        let i = (x.floor() as usize).min(self.values.len() - 2);
        let th = x - i as f64;
        self.values[i] * (1.0 - th) + self.values[i + 1] * th
    }

    pub fn check_covers(&self, lo: f64, hi: f64) -> Result<(), ShortRateError> {
        let slack = 1e-9 * self.dt.max(1.0);
        if self.start > lo + slack {
            return Err(ShortRateError::HistoryTooShort {
                need: lo,
                have: self.start,
            });
        }
        if self.end() < hi - slack {
            return Err(ShortRateError::InvalidArgument(format!(
                "path ends at {} before {}",
                self.end(),
                hi
            )));
        }
        Ok(())
    }

    /// Sparse weights w_k with ∫_lo^hi g(u) r(u) du = Σ w_k r_k for the piecewise
    /// linear interpolant r of the path. `kinks` are non-smooth points of g and
    /// `rate` the exponential rate used to grade panels.
    pub fn integral_weights(
        &self,
        lo: f64,
        hi: f64,
        kinks: &[f64],
        rate: f64,
        mut g: impl FnMut(f64) -> f64,
    ) -> (usize, Vec<f64>) {
        if !(hi > lo) {
            return (0, Vec::new());
        }
        let xl = ((lo - self.start) / self.dt).max(0.0);
        let xh = ((hi - self.start) / self.dt).min((self.values.len() - 1) as f64);
        let i0 = xl.floor() as usize;
        let i1 = (xh.ceil() as usize).min(self.values.len() - 1);
        let mut breaks: Vec<f64> = (i0..=i1).map(|i| self.time(i)).collect();
        breaks.extend_from_slice(kinks);
        let edges = quad::panels(lo, hi, &breaks, rate);
        let mut w = vec![0.0; i1 - i0 + 1];
        let rule = quad::gl16();
        for e in edges.windows(2) {
            let (a, b) = (e[0], e[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            // the panel lies in one grid cell, so the hat split is by cell
            let cell = (((mid - self.start) / self.dt).floor() as usize).clamp(i0, i1.max(i0 + 1) - 1);
            let left = self.time(cell);
            for (x, wt) in rule.nodes.iter().zip(&rule.weights) {
                let u = mid + half * x;
                let gv = wt * half * g(u);
                let th = ((u - left) / self.dt).clamp(0.0, 1.0);
                w[cell - i0] += gv * (1.0 - th);
                if cell + 1 - i0 < w.len() {
                    w[cell + 1 - i0] += gv * th;
                }
            }
        }
        (i0, w)
    }

    pub fn dot_weights(&self, (i0, w): &(usize, Vec<f64>)) -> f64 {
        w.iter()
            .enumerate()
            .map(|(k, wk)| wk * self.values[i0 + k])
            .sum()
    }

    /// ∫_lo^hi g(u) r(u) du over the linear interpolant.
    pub fn integral(
        &self,
        lo: f64,
        hi: f64,
        kinks: &[f64],
        rate: f64,
        g: impl FnMut(f64) -> f64,
    ) -> f64 {
        let w = self.integral_weights(lo, hi, kinks, rate, g);
        self.dot_weights(&w)
    }

    /// Trapezoid ∫_lo^hi r(u) du on the grid, with interpolated end cells.
    pub fn trapezoid(&self, lo: f64, hi: f64) -> f64 {
        self.integral(lo, hi, &[], 0.0, |_| 1.0)
    }
}

/// Normal law of r_T given the information at t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalLaw {
    pub mean: f64,
    pub variance: f64,
}

/// Σ_j c_j ∫_{t−τ_j}^{t} k(T−u−τ_j) r_u du for a kernel function k vanishing on (−∞,0).
pub(crate) fn delay_history_term(
    kernel: &Kernel,
    history: &PathSample,
    t: f64,
    maturity: f64,
    mut k: impl FnMut(f64) -> f64,
) -> f64 {
    let co = kernel.coeffs();
    let lags: Vec<f64> = kernel.terms().iter().map(|m| m.lag).collect();
    let mut s = 0.0;
    for (cj, tj) in co.c.iter().zip(&co.tau) {
        if *cj == 0.0 {
            continue;
        }
        let lo = t - tj;
        let hi = t.min(maturity - tj);
        if hi <= lo {
            continue;
        }
        let kinks: Vec<f64> = lags.iter().map(|l| maturity - tj - l).collect();
        s += cj * history.integral(lo, hi, &kinks, co.b, |u| k(maturity - u - tj));
    }
    s
}

pub(crate) fn shift_breaks(f: &PiecewiseConstant, maturity: f64) -> impl Iterator<Item = f64> + '_ {
    f.breaks().iter().map(move |x| maturity - x)
}

/// ∫₀^h f(T−u) g(u) du with panels at kernel lags and the shifted breaks of f.
pub(crate) fn integrate_against(
    kernel: &Kernel,
    f: &PiecewiseConstant,
    maturity: f64,
    h: f64,
    mut g: impl FnMut(f64) -> f64,
) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    let mut kinks = kernel.breakpoints(h);
    kinks.extend(shift_breaks(f, maturity));
    let edges = quad::panels(0.0, h, &kinks, kernel.coeffs().b);
    quad::integrate_panels(&edges, |u| f.eval(maturity - u) * g(u))
}

/// Conditional mean and variance of r_T given the path up to t.
pub fn conditional_law(
    model: &ModelParams,
    history: &PathSample,
    t: f64,
    maturity: f64,
) -> Result<ConditionalLaw, ShortRateError> {
    if !(maturity >= t) {
        return Err(ShortRateError::InvalidArgument(format!(
            "need T >= t, got t = {t}, T = {maturity}"
        )));
    }
    history.check_covers(t - model.tau_max(), t)?;
    let h = maturity - t;
    let kernel = model.kernel(h)?;
    conditional_law_with(model, &kernel, history, t, maturity)
}

pub(crate) fn conditional_law_with(
    model: &ModelParams,
    kernel: &Kernel,
    history: &PathSample,
    t: f64,
    maturity: f64,
) -> Result<ConditionalLaw, ShortRateError> {
    let h = maturity - t;
    let mut err = None;
    let mut r = |u: f64| match kernel.r(u) {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            0.0
        }
    };
    let drift = match model.a.as_constant() {
        Some(a) => a * kernel.i(h)?,
        None => integrate_against(kernel, &model.a, maturity, h, &mut r),
    };
    let variance = {
        let mut sq = |u: f64| {
            let v = r(u);
            v * v
        };
        let s2 = PiecewiseConstant::new(
            model.sigma.breaks().to_vec(),
            model.sigma.values().iter().map(|s| s * s).collect(),
        )?;
        integrate_against(kernel, &s2, maturity, h, &mut sq)
    };
    let mean = drift
        + kernel.r(h)? * history.value_at(t)
        + delay_history_term(kernel, history, t, maturity, &mut r);
    if let Some(e) = err {
        return Err(e.into());
    }
    Ok(ConditionalLaw { mean, variance })
}

/// One simulated trajectory on the model grid, including pre-history.
pub type PathView<'a> = &'a [f64];

#[derive(Debug, Clone)]
struct SimGrid {
    dt: f64,
    n_pre: usize,
    n_steps: usize,
    k: Vec<usize>,
    pre: Vec<f64>,
}

fn sim_grid(
    model: &ModelParams,
    phi: &InitialCurve,
    r0: f64,
    horizon: f64,
    dt: f64,
) -> Result<SimGrid, ShortRateError> {
    model.validate()?;
    if !(horizon > 0.0) {
        return Err(ShortRateError::InvalidArgument("horizon must be positive".into()));
    }
    if !(dt > 0.0) || dt > model.coeffs.tau1() * (1.0 + 1e-12) {
        return Err(ShortRateError::InvalidStep(format!(
            "dt = {dt} must lie in (0, tau_1]"
        )));
    }
    let mut k = Vec::new();
    for t in &model.coeffs.tau {
        let x = t / dt;
        if (x - x.round()).abs() > 1e-9 * x.max(1.0) {
            return Err(ShortRateError::InvalidStep(format!(
                "dt = {dt} does not divide delay {t}"
            )));
        }
        k.push(x.round() as usize);
    }
    let n_pre = *k.last().unwrap();
    let x = horizon / dt;
    let n_steps = if (x - x.round()).abs() <= 1e-9 * x.max(1.0) {
        x.round() as usize
    } else {
        x.ceil() as usize
    };
    let mut pre: Vec<f64> = (0..n_pre)
        .map(|i| phi.eval(-(n_pre as f64) * dt + i as f64 * dt))
        .collect();
    pre.push(r0);
    Ok(SimGrid {
        dt,
        n_pre,
        n_steps,
        k,
        pre,
    })
}

/// Per-step coefficients of the exact Gaussian transition.
#[derive(Debug, Clone)]
struct ExactStep {
    m0: Vec<f64>,
    sd: Vec<f64>,
    decay: f64,
    // weights of r at the two ends of the delayed cell
    wa: f64,
    wb: f64,
}

fn exact_steps(model: &ModelParams, g: &SimGrid) -> ExactStep {
    let b = model.coeffs.b;
    let dt = g.dt;
    let e = |u: f64| (b * u).exp();
    let per_step = |i: usize| -> (f64, f64) {
        let t1 = (i + 1) as f64 * dt;
        let mut br: Vec<f64> = model.a.breaks().iter().map(|x| t1 - x).collect();
        br.extend(model.sigma.breaks().iter().map(|x| t1 - x));
        let edges = quad::panels(0.0, dt, &br, b);
        let m0 = quad::integrate_panels(&edges, |u| model.a.eval(t1 - u) * e(u));
        let v = quad::integrate_panels(&edges, |u| {
            let s = model.sigma.eval(t1 - u);
            s * s * e(u) * e(u)
        });
        (m0, v.max(0.0).sqrt())
    };
    let constant = model.a.as_constant().is_some() && model.sigma.as_constant().is_some();
    let (m0, sd): (Vec<f64>, Vec<f64>) = if constant {
        let (m, s) = per_step(0);
        (vec![m], vec![s])
    } else {
        (0..g.n_steps).map(per_step).unzip()
    };
    // trapezoid over the delayed cell, the same rule the transition regression
    // uses, so noiseless paths satisfy the fitted recursion exactly
    let wa = 0.5 * dt * e(dt);
    let wb = 0.5 * dt;
    ExactStep {
        m0,
        sd,
        decay: e(dt),
        wa,
        wb,
    }
}

fn run_paths<T: Send>(
    n_paths: usize,
    seed: u64,
    len: usize,
    pre: &[f64],
    step: impl Fn(&mut [f64], usize, &mut ChaCha8Rng) + Sync,
    n_steps: usize,
    n_pre: usize,
    f: impl Fn(usize, PathView) -> T + Sync,
) -> Vec<T> {
    (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut v = vec![0.0; len];
            v[..pre.len()].copy_from_slice(pre);
            for i in 0..n_steps {
                step(&mut v, n_pre + i, &mut rng);
            }
            f(p, &v)
        })
        .collect()
}

/// Which transition to iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Exact,
    Euler,
}

/// Simulate and reduce each path with `f(path_index, values)` in parallel.
///
/// Path p draws from the ChaCha8 stream p of `seed`, so the output does not
/// depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn simulate_map<T: Send>(
    scheme: Scheme,
    model: &ModelParams,
    phi: &InitialCurve,
    r0: f64,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    f: impl Fn(usize, PathView) -> T + Sync,
) -> Result<(f64, usize, Vec<T>), ShortRateError> {
    let g = sim_grid(model, phi, r0, horizon, dt)?;
    let len = g.n_pre + g.n_steps + 1;
    let co = &model.coeffs;
    let out = match scheme {
        Scheme::Exact => {
            let st = exact_steps(model, &g);
            let step = |v: &mut [f64], i: usize, rng: &mut ChaCha8Rng| {
                let s = i - g.n_pre;
                let (m0, sd) = if st.m0.len() == 1 {
                    (st.m0[0], st.sd[0])
                } else {
                    (st.m0[s], st.sd[s])
                };
                let mut m = m0 + st.decay * v[i];
                for (cj, &kj) in co.c.iter().zip(&g.k) {
                    m += cj * (st.wa * v[i - kj] + st.wb * v[i + 1 - kj]);
                }
                let z: f64 = StandardNormal.sample(rng);
                v[i + 1] = m + sd * z;
            };
            run_paths(n_paths, seed, len, &g.pre, step, g.n_steps, g.n_pre, f)
        }
        Scheme::Euler => {
            let b = co.b;
            let sq = g.dt.sqrt();
            let step = |v: &mut [f64], i: usize, rng: &mut ChaCha8Rng| {
                let t = (i - g.n_pre) as f64 * g.dt;
                let mut drift = model.a.eval(t) + b * v[i];
                for (cj, &kj) in co.c.iter().zip(&g.k) {
                    drift += cj * v[i - kj];
                }
                let z: f64 = StandardNormal.sample(rng);
                v[i + 1] = v[i] + drift * g.dt + model.sigma.eval(t) * sq * z;
            };
            run_paths(n_paths, seed, len, &g.pre, step, g.n_steps, g.n_pre, f)
        }
    };
    Ok((-(g.n_pre as f64) * g.dt, g.n_pre, out))
}

fn collect_paths(
    scheme: Scheme,
    model: &ModelParams,
    phi: &InitialCurve,
    r0: f64,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathSample>, ShortRateError> {
    let (start, _, paths) = simulate_map(scheme, model, phi, r0, horizon, dt, n_paths, seed, |_, v| {
        v.to_vec()
    })?;
    Ok(paths
        .into_iter()
        .map(|values| PathSample {
            start,
            dt,
            t0: 0.0,
            values,
            seed: Some(seed),
        })
        .collect())
}

/// Paths from the exact one-step Gaussian transition.
#[allow(clippy::too_many_arguments)]
pub fn simulate_exact(
    model: &ModelParams,
    phi: &InitialCurve,
    r0: f64,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathSample>, ShortRateError> {
    collect_paths(Scheme::Exact, model, phi, r0, horizon, dt, n_paths, seed)
}

/// Euler–Maruyama paths with delayed terms read from the path.
#[allow(clippy::too_many_arguments)]
pub fn simulate_euler(
    model: &ModelParams,
    phi: &InitialCurve,
    r0: f64,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathSample>, ShortRateError> {
    collect_paths(Scheme::Euler, model, phi, r0, horizon, dt, n_paths, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StabilityVerdict {
    StableForAllDelays,
    NotGuaranteed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub verdict: StabilityVerdict,
    /// |b| − Σ|c_j|
    pub margin: f64,
    /// the margin is within 1e-12 of zero
    pub near_boundary: bool,
}

/// Delay-independent stability: b + Σc_j ≠ 0, |b| ≥ Σ|c_j| and b < 0.
pub fn stability_check(coeffs: &DelayCoefficients) -> StabilityVerdict {
    stability_report(coeffs).verdict
}

pub fn stability_report(coeffs: &DelayCoefficients) -> StabilityReport {
    let b = coeffs.b;
    let sum_c: f64 = coeffs.c.iter().sum();
    let sum_abs: f64 = coeffs.c.iter().map(|c| c.abs()).sum();
    let margin = b.abs() - sum_abs;
    let ok = b + sum_c != 0.0 && b.abs() >= sum_abs && b < 0.0;
    StabilityReport {
        verdict: if ok {
            StabilityVerdict::StableForAllDelays
        } else {
            StabilityVerdict::NotGuaranteed
        },
        margin,
        near_boundary: margin.abs() <= 1e-12,
    }
}

/// Limits of ∫₀^T a(u)R(T−u)du and ∫₀^T σ²(u)R²(T−u)du as T grows.
///
/// Horizons increase in steps of max(10, 2τ_N) until both change by less than
/// the series tolerance, or `t_grid_cap` is passed.
pub fn limiting_distribution(
    model: &ModelParams,
    t_grid_cap: f64,
) -> Result<ConditionalLaw, ShortRateError> {
    if stability_check(&model.coeffs) != StabilityVerdict::StableForAllDelays {
        return Err(ShortRateError::InvalidModel(
            "stability condition not satisfied".into(),
        ));
    }
    let step = 10f64.max(2.0 * model.tau_max());
    let tol = SeriesConfig::default().rel_tol;
    let mut prev: Option<ConditionalLaw> = None;
    let mut big_t = step;
    while big_t <= t_grid_cap {
        let law = stationary_moments(model, big_t)?;
        if let Some(p) = prev {
            let dm = (law.mean - p.mean).abs();
            let dv = (law.variance - p.variance).abs();
            if dm <= tol * law.mean.abs().max(1e-300) && dv <= tol * law.variance.abs().max(1e-300)
            {
                return Ok(law);
            }
        }
        prev = Some(law);
        big_t += step;
    }
    Err(ShortRateError::NotConverged { horizon: t_grid_cap })
}

fn stationary_moments(model: &ModelParams, big_t: f64) -> Result<ConditionalLaw, ShortRateError> {
    let k = model.kernel(big_t)?;
    let mut err = None;
    let mut r = |u: f64| match k.r(u) {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            0.0
        }
    };
    let mean = match model.a.as_constant() {
        Some(a) => a * k.i(big_t)?,
        None => integrate_against(&k, &model.a, big_t, big_t, &mut r),
    };
    let s2 = PiecewiseConstant::new(
        model.sigma.breaks().to_vec(),
        model.sigma.values().iter().map(|s| s * s).collect(),
    )?;
    let variance = integrate_against(&k, &s2, big_t, big_t, |u| {
        let v = r(u);
        v * v
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    Ok(ConditionalLaw { mean, variance })
}

fn same_delays(q: &ModelParams, p: &ModelParams) -> Result<(), ShortRateError> {
    if q.coeffs.tau != p.coeffs.tau {
        return Err(ShortRateError::DelayMismatch);
    }
    Ok(())
}

/// Market price of risk λ_t turning the real-world model P into the pricing model Q.
pub fn market_price_of_risk(
    model_q: &ModelParams,
    model_p: &ModelParams,
    history: &PathSample,
    t: f64,
) -> Result<f64, ShortRateError> {
    same_delays(model_q, model_p)?;
    history.check_covers(t - model_q.tau_max(), t)?;
    let (q, p) = (&model_q.coeffs, &model_p.coeffs);
    let mut num = model_q.a.eval(t) - model_p.a.eval(t) + (q.b - p.b) * history.value_at(t);
    for j in 0..q.n() {
        num += (q.c[j] - p.c[j]) * history.value_at(t - q.tau[j]);
    }
    Ok(num / model_q.sigma.eval(t))
}

/// Growth constant ξ of the Novikov-type condition that makes the density process
/// of the measure change a martingale on [0, horizon].
///
/// Constants follow the printed proof, including the factor 2/c_σ in c_λ.
pub fn martingale_bound_xi(
    model_q: &ModelParams,
    model_p: &ModelParams,
    phi: &InitialCurve,
    r0: f64,
    horizon: f64,
) -> Result<f64, ShortRateError> {
    same_delays(model_q, model_p)?;
    let n = model_q.coeffs.n() as f64;
    let on = |f: &PiecewiseConstant| -> Vec<f64> {
        // values active somewhere on [0, horizon)
        let mut v = vec![f.eval(0.0)];
        for (i, &x) in f.breaks().iter().enumerate() {
            if x > 0.0 && x < horizon {
                v.push(f.values()[i + 1]);
            }
        }
        v
    };
    let c_phi = phi.sup_abs();
    let mut grid: Vec<f64> = vec![0.0];
    grid.extend(model_q.a.breaks().iter().chain(model_p.a.breaks()).filter(|x| **x > 0.0 && **x < horizon));
    let c_a = grid
        .iter()
        .map(|&t| (model_q.a.eval(t) - model_p.a.eval(t)).powi(2))
        .fold(0.0, f64::max);
    let c_sigma = on(&model_q.sigma)
        .iter()
        .map(|s| 1.0 / (s * s))
        .fold(0.0, f64::max);
    let ca_t = on(&model_q.a).iter().map(|a| a * a).fold(0.0, f64::max);
    let cs_t = on(&model_q.sigma).iter().map(|s| s * s).fold(0.0, f64::max);
    let (q, p) = (&model_q.coeffs, &model_p.coeffs);
    let dc2: f64 = q.c.iter().zip(&p.c).map(|(c, g)| (c - g).powi(2)).sum();
    let c2: f64 = q.c.iter().map(|c| c * c).sum();
    let inner = (2.0 * c_a + n * c_phi * c_phi * dc2).max(2.0 * (q.b - p.b).powi(2) + n * dc2);
    let c_lambda = if c_sigma.is_finite() && c_sigma > 0.0 {
        2.0 / c_sigma * inner
    } else {
        0.0
    };
    let drift = (4.0 * ca_t + 2.0 * n * c_phi * c_phi * c2 + cs_t).max(4.0 * q.b * q.b + 2.0 * n * c2);
    Ok(r0.abs().max(c_lambda).max(drift + cs_t * c_lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table1() -> ModelParams {
        ModelParams::constant(0.05219, -1.00232, vec![-0.14587], vec![1.0], 0.00402).unwrap()
    }

    #[test]
    fn vasicek_conditional_law() {
        let (theta, s) = (0.04, 0.004);
        let m = ModelParams::constant(theta, -1.0, vec![0.0], vec![1.0], s).unwrap();
        let h = PathSample::flat(0.0, 1.0, 0.01, 0.05);
        let law = conditional_law(&m, &h, 0.0, 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert_relative_eq!(law.mean, theta + (0.05 - theta) * e, max_relative = 1e-13);
        assert_relative_eq!(law.variance, s * s * (1.0 - e * e) / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_horizon() {
        let m = table1();
        let h = PathSample::flat(0.0, 1.0, 1.0 / 64.0, 0.0555);
        let law = conditional_law(&m, &h, 0.0, 0.0).unwrap();
        assert_relative_eq!(law.mean, 0.0555, max_relative = 1e-15);
        assert_eq!(law.variance, 0.0);
    }

    #[test]
    fn short_history_rejected() {
        let h = PathSample::flat(0.0, 0.5, 0.01, 0.05);
        let e = conditional_law(&table1(), &h, 0.0, 1.0).unwrap_err();
        assert!(matches!(e, ShortRateError::HistoryTooShort { .. }));
    }

    #[test]
    fn stability_examples() {
        let v = |b: f64, c: f64| stability_check(&DelayCoefficients::new(b, vec![c], vec![1.0]).unwrap());
        assert_eq!(v(-1.00232, -0.14587), StabilityVerdict::StableForAllDelays);
        assert_eq!(v(1.0, 0.0), StabilityVerdict::NotGuaranteed);
        let r = stability_report(&DelayCoefficients::new(-1.0, vec![-1.0], vec![1.0]).unwrap());
        assert_eq!(r.verdict, StabilityVerdict::StableForAllDelays);
        assert!(r.near_boundary);
    }

    #[test]
    fn vasicek_limit() {
        let m = ModelParams::constant(0.05, -1.0, vec![0.0], vec![1.0], 0.01).unwrap();
        let l = limiting_distribution(&m, 200.0).unwrap();
        assert_relative_eq!(l.mean, 0.05, max_relative = 1e-12);
        assert_relative_eq!(l.variance, 0.01 * 0.01 / 2.0, max_relative = 1e-12);
        let z = ModelParams::constant(0.0, -1.0, vec![0.0], vec![1.0], 0.01).unwrap();
        assert_eq!(limiting_distribution(&z, 200.0).unwrap().mean, 0.0);
    }

    #[test]
    fn lambda_examples() {
        let m = table1();
        let h = PathSample::flat(0.0, 1.0, 0.01, 0.05);
        assert_eq!(market_price_of_risk(&m, &m, &h, 0.0).unwrap(), 0.0);
        let mut p = m.clone();
        p.a = PiecewiseConstant::constant(0.05219 - 0.01);
        let s = ModelParams::constant(0.05219, -1.00232, vec![-0.14587], vec![1.0], 0.004).unwrap();
        let mut ps = s.clone();
        ps.a = PiecewiseConstant::constant(0.05219 - 0.01);
        assert_relative_eq!(market_price_of_risk(&s, &ps, &h, 0.0).unwrap(), 2.5, max_relative = 1e-12);
    }

    #[test]
    fn xi_zero_model() {
        let z = ModelParams {
            coeffs: DelayCoefficients::new(0.0, vec![0.0], vec![1.0]).unwrap(),
            a: PiecewiseConstant::constant(0.0),
            sigma: PiecewiseConstant::constant(0.0),
        };
        let phi = InitialCurve::flat(1.0, 0.0, 8);
        assert_eq!(martingale_bound_xi(&z, &z, &phi, 0.0, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn xi_monotone_in_drift_gap() {
        let q = table1();
        let phi = InitialCurve::flat(1.0, 0.05, 65);
        let mut last = 0.0;
        for k in 1..6 {
            let mut p = q.clone();
            p.coeffs.b = q.coeffs.b + 0.1 * k as f64;
            let xi = martingale_bound_xi(&q, &p, &phi, 0.0555, 10.0).unwrap();
            assert!(xi.is_finite() && xi > 0.0 && xi >= last);
            last = xi;
        }
    }

    #[test]
    fn vanishing_noise_follows_the_delay_ode() {
        let m = ModelParams {
            sigma: PiecewiseConstant::constant(1e-12),
            ..table1()
        };
        let dt = 1.0 / 256.0;
        let phi = InitialCurve::from_fn(1.0, 256, |s| 0.05 + 0.01 * s).unwrap();
        let path = &simulate_exact(&m, &phi, 0.05, 5.0, dt, 1, 1).unwrap()[0];
        let oracle = crate::series_kernel::dde_oracle(
            &m.coeffs,
            &|s| 0.05 + 0.01 * s,
            0.05,
            0.05219,
            5.0,
            dt / 4.0,
        )
        .unwrap();
        let worst = (0..=1280)
            .map(|i| (path.value_at(i as f64 * dt) - oracle.eval(i as f64 * dt)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst:e}");
    }

    #[test]
    fn seeded_simulation_is_reproducible() {
        let m = table1();
        let phi = InitialCurve::flat(1.0, 0.05, 65);
        let a = simulate_exact(&m, &phi, 0.05, 0.5, 1.0 / 64.0, 8, 7).unwrap();
        let b = simulate_exact(&m, &phi, 0.05, 0.5, 1.0 / 64.0, 8, 7).unwrap();
        assert_eq!(a, b);
        assert!(simulate_euler(&m, &phi, 0.05, 0.5, 1.0 / 64.0, 0, 7).unwrap().is_empty());
    }

    #[test]
    fn step_must_divide_delay() {
        let m = table1();
        let phi = InitialCurve::flat(1.0, 0.05, 65);
        assert!(simulate_exact(&m, &phi, 0.05, 1.0, 0.3, 1, 1).is_err());
        assert!(simulate_exact(&m, &phi, 0.05, 1.0, 2.0, 1, 1).is_err());
    }
}
