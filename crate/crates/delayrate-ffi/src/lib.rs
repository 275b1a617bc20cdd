//! C ABI over the delayrate library.
//!
//! Every function returns a [`DrStatus`]. On failure the message is kept per
//! thread and can be copied out with [`dr_last_error_message`]. Handles are
//! opaque and owned by the caller, who must release them with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use delayrate::marketfit::{implied_phi_value, Interpolation, YieldCurve};
use delayrate::rfr_caplets::{black_type_price, caplet_variance_nu, CapletQuote, CapletStyle};
use delayrate::shortrate::{stability_report, ModelJson, ModelParams, PathSample, StabilityVerdict};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Panic = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrInterpolation {
    MonotoneCubic = 0,
    LogLinear = 1,
    Nss = 2,
    NelsonSiegel = 3,
}

/// Model parameters with constant a and σ.
pub struct DrModel(ModelParams);

/// Market yield curve.
pub struct DrCurve(YieldCurve);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn guard(f: impl FnOnce() -> Result<(), (DrStatus, String)>) -> DrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DrStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DrStatus::Panic
        }
    }
}

fn invalid(e: impl ToString) -> (DrStatus, String) {
    (DrStatus::InvalidArgument, e.to_string())
}

fn numerical(e: impl ToString) -> (DrStatus, String) {
    (DrStatus::Numerical, e.to_string())
}

fn null(name: &str) -> (DrStatus, String) {
    (DrStatus::NullPointer, format!("{name} is null"))
}

unsafe fn slice<'a>(p: *const f64, n: usize, name: &str) -> Result<&'a [f64], (DrStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write<T>(out: *mut T, v: T) -> Result<(), (DrStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = v;
    Ok(())
}

unsafe fn model_ref<'a>(m: *const DrModel) -> Result<&'a ModelParams, (DrStatus, String)> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

unsafe fn curve_ref<'a>(c: *const DrCurve) -> Result<&'a YieldCurve, (DrStatus, String)> {
    c.as_ref().map(|c| &c.0).ok_or_else(|| null("curve"))
}

/// Copy the last error message of this thread into `buf` (NUL terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Build a model with `n` delays.
///
/// # Safety
/// `c` and `tau` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dr_model_new(
    a: f64,
    b: f64,
    c: *const f64,
    tau: *const f64,
    n: usize,
    sigma: f64,
    out: *mut *mut DrModel,
) -> DrStatus {
    guard(|| {
        let c = slice(c, n, "c")?.to_vec();
        let tau = slice(tau, n, "tau")?.to_vec();
        let m = ModelParams::constant(a, b, c, tau, sigma).map_err(invalid)?;
        write(out, Box::into_raw(Box::new(DrModel(m))))
    })
}

/// Build a model from its JSON description.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dr_model_from_json(json: *const c_char, out: *mut *mut DrModel) -> DrStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(invalid)?;
        let j: ModelJson = serde_json::from_str(text).map_err(invalid)?;
        let m = ModelParams::from_json(&j).map_err(invalid)?;
        write(out, Box::into_raw(Box::new(DrModel(m))))
    })
}

/// # Safety
/// `model` must come from a constructor above and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dr_model_free(model: *mut DrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fundamental solution R(t).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_kernel_r(model: *const DrModel, t: f64, out: *mut f64) -> DrStatus {
    guard(|| {
        let m = model_ref(model)?;
        let k = m.kernel(t.max(0.0)).map_err(numerical)?;
        write(out, k.r(t).map_err(numerical)?)
    })
}

/// B(0, T) with a flat initial curve equal to `r0`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_bond_price_flat(model: *const DrModel, r0: f64, maturity: f64, out: *mut f64) -> DrStatus {
    guard(|| {
        let m = model_ref(model)?;
        if !(maturity >= 0.0) {
            return Err(invalid("maturity must be non-negative"));
        }
        let tau = m.tau_max();
        let hist = PathSample::flat(0.0, tau, tau / 256.0, r0);
        write(out, delayrate::bonds::bond_price(m, &hist, 0.0, maturity).map_err(numerical)?)
    })
}

/// Forward-looking caplet on [T − Δ, T] at time 0, per unit notional.
/// `discount` is B(0,T) and `y` is B(0,T−Δ)/B(0,T).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_caplet_price(
    model: *const DrModel,
    accrual_end: f64,
    delta: f64,
    strike: f64,
    discount: f64,
    y: f64,
    out: *mut f64,
) -> DrStatus {
    guard(|| {
        let m = model_ref(model)?;
        let q = CapletQuote::new(accrual_end, delta, strike, 1.0, CapletStyle::ForwardLooking).map_err(invalid)?;
        let nu = caplet_variance_nu(m, 0.0, q.s, &q).map_err(numerical)?;
        write(out, black_type_price(discount, y, q.khat(), nu).map_err(numerical)?)
    })
}

/// Stability verdict (1 when stable for all delays) and the margin |b| − Σ|c|.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_stability(model: *const DrModel, stable: *mut i32, margin: *mut f64) -> DrStatus {
    guard(|| {
        let m = model_ref(model)?;
        let r = stability_report(&m.coeffs);
        write(stable, (r.verdict == StabilityVerdict::StableForAllDelays) as i32)?;
        write(margin, r.margin)
    })
}

/// Yield curve from `n` maturities and continuously compounded yields.
///
/// # Safety
/// `maturities` and `yields` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dr_curve_new(
    maturities: *const f64,
    yields: *const f64,
    n: usize,
    interpolation: DrInterpolation,
    out: *mut *mut DrCurve,
) -> DrStatus {
    guard(|| {
        let m = slice(maturities, n, "maturities")?.to_vec();
        let y = slice(yields, n, "yields")?.to_vec();
        let scheme = match interpolation {
            DrInterpolation::MonotoneCubic => Interpolation::MonotoneCubic,
            DrInterpolation::LogLinear => Interpolation::LogLinear,
            DrInterpolation::Nss => Interpolation::Nss,
            DrInterpolation::NelsonSiegel => Interpolation::NelsonSiegel,
        };
        let c = YieldCurve::new(m, y, scheme).map_err(invalid)?;
        write(out, Box::into_raw(Box::new(DrCurve(c))))
    })
}

/// # Safety
/// `curve` must come from [`dr_curve_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dr_curve_free(curve: *mut DrCurve) {
    if !curve.is_null() {
        drop(Box::from_raw(curve));
    }
}

/// Discount factor exp(−y(s) s).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_curve_discount(curve: *const DrCurve, s: f64, out: *mut f64) -> DrStatus {
    guard(|| write(out, curve_ref(curve)?.discount(s).map_err(invalid)?))
}

/// Instantaneous market forward f(0, s).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_curve_market_forward(curve: *const DrCurve, s: f64, out: *mut f64) -> DrStatus {
    guard(|| write(out, curve_ref(curve)?.market_forward(s).map_err(invalid)?))
}

/// Implied initial curve φ(s), s ∈ [−τ1, 0], for a one-delay model.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dr_implied_phi(curve: *const DrCurve, model: *const DrModel, s: f64, out: *mut f64) -> DrStatus {
    guard(|| {
        let c = curve_ref(curve)?;
        let m = model_ref(model)?;
        let tau = m.tau_max();
        if !(s >= -tau && s <= 0.0) {
            return Err(invalid(format!("s = {s} outside [-{tau}, 0]")));
        }
        write(out, implied_phi_value(c, m, s).map_err(invalid)?)
    })
}
