//! C ABI over sepkit.
//!
//! Objects cross the boundary as opaque handles created by `*_from_json` or
//! a constructor and released by the matching `*_free`. Every fallible call
//! returns a [`SepkitStatus`]; on failure [`sepkit_last_error`] holds a
//! message for the calling thread. Panics never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fmt::Display;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nalgebra::DVector;
use sepkit::control_sep::{belief_policy, brute_force_q, policy_return, verify_separation, FinitePOMDP};
use sepkit::harness::{all_pass, run, Experiment, ExperimentConfig, HarnessError};
use sepkit::lgss::{LgssModel, Trajectory};
use sepkit::seprep::{filter_step, kalman_reference_nll, SepFilterModel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SepkitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Numerical = 4,
    Io = 5,
    Failed = 6,
    Panic = 7,
}

/// Linear-Gaussian state-space model.
pub struct SepkitLgss(LgssModel);

/// Finite-horizon POMDP.
pub struct SepkitPomdp(FinitePOMDP);

/// Trained separating filter.
pub struct SepkitFilter(SepFilterModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Fallible = Result<(), (SepkitStatus, String)>;

fn guard(f: impl FnOnce() -> Fallible) -> SepkitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SepkitStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside sepkit".into());
            SepkitStatus::Panic
        }
    }
}

fn with<E: Display>(status: SepkitStatus) -> impl FnOnce(E) -> (SepkitStatus, String) {
    move |e| (status, e.to_string())
}

fn null(what: &str) -> (SepkitStatus, String) {
    (SepkitStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SepkitStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (SepkitStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slot<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (SepkitStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, (SepkitStatus, String)> {
    p.as_ref().ok_or_else(|| null("handle"))
}

unsafe fn values<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (SepkitStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next sepkit call on the same thread.
#[no_mangle]
pub extern "C" fn sepkit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn sepkit_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Scalar model `x' = a x + w`, `y = c x + v` with `w ~ N(0, q)`, `v ~ N(0, r)`, `x_0 ~ N(mu0, p0)`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sepkit_lgss_scalar(a: f64, c: f64, q: f64, r: f64, mu0: f64, p0: f64, out: *mut *mut SepkitLgss) -> SepkitStatus {
    guard(|| {
        let out = slot(out, "out")?;
        let m = LgssModel::scalar(a, c, q, r, mu0, p0).map_err(with(SepkitStatus::InvalidArgument))?;
        *out = Box::into_raw(Box::new(SepkitLgss(m)));
        Ok(())
    })
}

/// # Safety
/// `json` must be a nul-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sepkit_lgss_from_json(json: *const c_char, out: *mut *mut SepkitLgss) -> SepkitStatus {
    guard(|| {
        let json = text(json, "json")?;
        let out = slot(out, "out")?;
        let m = LgssModel::from_json(json).map_err(with(SepkitStatus::Parse))?;
        *out = Box::into_raw(Box::new(SepkitLgss(m)));
        Ok(())
    })
}

/// State, observation and control dimensions.
///
/// # Safety
/// `model` must come from a `sepkit_lgss_*` constructor; outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sepkit_lgss_dims(model: *const SepkitLgss, n: *mut usize, m: *mut usize, p: *mut usize) -> SepkitStatus {
    guard(|| {
        let model = &handle(model)?.0;
        *slot(n, "n")? = model.state_dim();
        *slot(m, "m")? = model.obs_dim();
        *slot(p, "p")? = model.control_dim();
        Ok(())
    })
}

/// Mean one-step predictive NLL of the Kalman filter on `steps` observations
/// (row-major, `steps x m`) with zero controls.
///
/// # Safety
/// `observations` must hold `steps * m` values; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sepkit_lgss_kalman_nll(model: *const SepkitLgss, observations: *const f64, steps: usize, out: *mut f64) -> SepkitStatus {
    guard(|| {
        let model = &handle(model)?.0;
        let out = slot(out, "out")?;
        if steps == 0 {
            return Err((SepkitStatus::InvalidArgument, "steps must be positive".into()));
        }
        let m = model.obs_dim();
        let ys = values(observations, steps * m, "observations")?;
        let traj = Trajectory {
            controls: vec![model.zero_control(); steps],
            states: Vec::new(),
            observations: ys.chunks(m).map(DVector::from_column_slice).collect(),
            targets: None,
        };
        let nll = kalman_reference_nll(model, &traj).map_err(with(SepkitStatus::Numerical))?;
        *out = nll.iter().sum::<f64>() / steps as f64;
        Ok(())
    })
}

/// # Safety
/// `model` must come from a `sepkit_lgss_*` constructor, or be null.
#[no_mangle]
pub unsafe extern "C" fn sepkit_lgss_free(model: *mut SepkitLgss) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// POMDP from JSON with keys `S, A, O, T, Omega, r, b0, H`.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sepkit_pomdp_from_json(json: *const c_char, out: *mut *mut SepkitPomdp) -> SepkitStatus {
    guard(|| {
        let json = text(json, "json")?;
        let out = slot(out, "out")?;
        let p = FinitePOMDP::from_json(json).map_err(with(SepkitStatus::Parse))?;
        *out = Box::into_raw(Box::new(SepkitPomdp(p)));
        Ok(())
    })
}

/// Optimal expected return over all history-dependent policies.
///
/// # Safety
/// `pomdp` must come from [`sepkit_pomdp_from_json`]; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sepkit_pomdp_optimal_return(pomdp: *const SepkitPomdp, out: *mut f64) -> SepkitStatus {
    guard(|| {
        let p = &handle(pomdp)?.0;
        let out = slot(out, "out")?;
        *out = brute_force_q(p).map_err(with(SepkitStatus::InvalidArgument))?.optimal_return();
        Ok(())
    })
}

/// Largest Q spread among histories with beliefs within `tol`, and the
/// return gap of the belief-indexed policy against the optimum.
///
/// # Safety
/// `pomdp` must come from [`sepkit_pomdp_from_json`]; outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sepkit_pomdp_check_separation(pomdp: *const SepkitPomdp, tol: f64, max_q_spread: *mut f64, policy_gap: *mut f64) -> SepkitStatus {
    guard(|| {
        let p = &handle(pomdp)?.0;
        let (spread, gap) = (slot(max_q_spread, "max_q_spread")?, slot(policy_gap, "policy_gap")?);
        if !(tol >= 0.0) {
            return Err((SepkitStatus::InvalidArgument, format!("tol = {tol}")));
        }
        let tree = brute_force_q(p).map_err(with(SepkitStatus::InvalidArgument))?;
        *spread = verify_separation(&tree, tol, tol).max_q_spread;
        let policy = belief_policy(&tree, tol);
        let ret = policy_return(p, &|d, b| policy.action(d, b)).map_err(with(SepkitStatus::Numerical))?;
        *gap = (ret - tree.optimal_return()).abs();
        Ok(())
    })
}

/// # Safety
/// `pomdp` must come from [`sepkit_pomdp_from_json`], or be null.
#[no_mangle]
pub unsafe extern "C" fn sepkit_pomdp_free(pomdp: *mut SepkitPomdp) {
    if !pomdp.is_null() {
        drop(Box::from_raw(pomdp));
    }
}

/// Filter saved by the `seprep` experiment (`filter_model.json`).
///
/// # Safety
/// `json` must be a nul-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sepkit_filter_from_json(json: *const c_char, out: *mut *mut SepkitFilter) -> SepkitStatus {
    guard(|| {
        let json = text(json, "json")?;
        let out = slot(out, "out")?;
        let m = SepFilterModel::from_json(json).map_err(with(SepkitStatus::Parse))?;
        *out = Box::into_raw(Box::new(SepkitFilter(m)));
        Ok(())
    })
}

/// Length of the filter state `phi = (mean, log_std)`.
///
/// # Safety
/// `filter` must come from [`sepkit_filter_from_json`]; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sepkit_filter_state_len(filter: *const SepkitFilter, out: *mut usize) -> SepkitStatus {
    guard(|| {
        *slot(out, "out")? = handle(filter)?.0.phi0().len();
        Ok(())
    })
}

/// Writes the initial state into `phi` (`len` values).
///
/// # Safety
/// `phi` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sepkit_filter_initial(filter: *const SepkitFilter, phi: *mut f64, len: usize) -> SepkitStatus {
    guard(|| {
        let f = &handle(filter)?.0;
        if len != f.phi0().len() || phi.is_null() {
            return Err((SepkitStatus::InvalidArgument, format!("state buffer of {len} for a state of {}", f.phi0().len())));
        }
        std::slice::from_raw_parts_mut(phi, len).copy_from_slice(f.phi0());
        Ok(())
    })
}

/// One update `phi <- f(phi, y, u)` in place.
///
/// # Safety
/// `phi` must hold `phi_len` values, `y` and `u` their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sepkit_filter_step(
    filter: *const SepkitFilter,
    phi: *mut f64,
    phi_len: usize,
    y: *const f64,
    y_len: usize,
    u: *const f64,
    u_len: usize,
    t: usize,
) -> SepkitStatus {
    guard(|| {
        let f = &handle(filter)?.0;
        if phi.is_null() {
            return Err(null("phi"));
        }
        let state = std::slice::from_raw_parts_mut(phi, phi_len);
        let next = filter_step(f, state, values(y, y_len, "y")?, values(u, u_len, "u")?, t).map_err(with(SepkitStatus::InvalidArgument))?;
        state.copy_from_slice(&next);
        Ok(())
    })
}

/// # Safety
/// `filter` must come from [`sepkit_filter_from_json`], or be null.
#[no_mangle]
pub unsafe extern "C" fn sepkit_filter_free(filter: *mut SepkitFilter) {
    if !filter.is_null() {
        drop(Box::from_raw(filter));
    }
}

/// Runs a named experiment with default parameters, writing its files under
/// `out_dir`. `passed` is set to whether every gated metric passed.
///
/// # Safety
/// `name` and `out_dir` must be nul-terminated strings; `passed` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sepkit_run_experiment(name: *const c_char, seed: u64, out_dir: *const c_char, passed: *mut bool) -> SepkitStatus {
    guard(|| {
        let experiment: Experiment = text(name, "name")?.parse().map_err(with(SepkitStatus::InvalidArgument))?;
        let out_dir = PathBuf::from(text(out_dir, "out_dir")?);
        let passed = slot(passed, "passed")?;
        let config = ExperimentConfig { experiment, seed, out_dir, ..ExperimentConfig::default() };
        let records = run(&config).map_err(|e| {
            let status = match e {
                HarnessError::Io { .. } => SepkitStatus::Io,
                HarnessError::Usage(_) | HarnessError::Config(_) => SepkitStatus::InvalidArgument,
                HarnessError::Experiment { .. } => SepkitStatus::Failed,
            };
            (status, e.to_string())
        })?;
        *passed = all_pass(&records);
        Ok(())
    })
}
