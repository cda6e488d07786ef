//! C ABI for `smjd`.
//!
//! Objects are handed out as opaque pointers and released with the matching
//! `*_free` function. Every call returns an [`SmjdStatus`]; on failure the
//! message is available from [`smjd_last_error_message`] on the same thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use smjd::cli::{run_experiment, ExperimentConfig, ExperimentKind, RunError};
use smjd::portfolio::{rs_optimal_control, rs_phi, PhiVariant, RiskSensitiveModel};
use smjd::semi_markov::{HoldingDist, RegimeModel, RegimeSampler};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmjdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Invalid configuration or argument.
    InvalidInput = 3,
    /// A numerical routine failed.
    Runtime = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmjdExperiment {
    Simulate = 0,
    RsVerify = 1,
    QlVerify = 2,
    Dynkin = 3,
    Hjb = 4,
    ReduceMarkov = 5,
    PolicyEval = 6,
}

impl From<SmjdExperiment> for ExperimentKind {
    fn from(e: SmjdExperiment) -> Self {
        match e {
            SmjdExperiment::Simulate => ExperimentKind::Simulate,
            SmjdExperiment::RsVerify => ExperimentKind::RsVerify,
            SmjdExperiment::QlVerify => ExperimentKind::QlVerify,
            SmjdExperiment::Dynkin => ExperimentKind::Dynkin,
            SmjdExperiment::Hjb => ExperimentKind::Hjb,
            SmjdExperiment::ReduceMarkov => ExperimentKind::ReduceMarkov,
            SmjdExperiment::PolicyEval => ExperimentKind::PolicyEval,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmjdHoldingLaw {
    /// `a` is the rate.
    Exponential = 0,
    /// `a` is the shape, `b` the scale.
    Weibull = 1,
}

/// Holding-time law of one regime.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SmjdHolding {
    pub law: SmjdHoldingLaw,
    pub a: f64,
    pub b: f64,
}

/// Mean and standard error of a Monte Carlo estimate.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SmjdEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: u64,
}

/// Opaque experiment configuration.
pub struct SmjdConfig(ExperimentConfig);

/// Opaque semi-Markov regime model.
pub struct SmjdRegimeModel(RegimeModel);

/// Opaque power-utility portfolio model.
pub struct SmjdRsModel(RiskSensitiveModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn fail(status: SmjdStatus, msg: impl Into<String>) -> SmjdStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> SmjdStatus) -> SmjdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == SmjdStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(SmjdStatus::Panic, format!("panic: {msg}"))
        }
    }
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, SmjdStatus> {
    if s.is_null() {
        return Err(fail(SmjdStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(SmjdStatus::InvalidUtf8, "string argument is not UTF-8"))
}

fn runtime(e: smjd::Error) -> SmjdStatus {
    fail(SmjdStatus::Runtime, e.to_string())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn smjd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn smjd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smjd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a JSON configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smjd_config_from_json(json: *const c_char, out: *mut *mut SmjdConfig) -> SmjdStatus {
    guard(|| {
        if out.is_null() {
            return fail(SmjdStatus::NullPointer, "null output pointer");
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::from_json(text) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(SmjdConfig(c)));
                SmjdStatus::Ok
            }
            Err(e) => fail(SmjdStatus::InvalidInput, e.to_string()),
        }
    })
}

/// Default configuration of `experiment`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smjd_config_default(experiment: SmjdExperiment, seed: u64, out: *mut *mut SmjdConfig) -> SmjdStatus {
    guard(|| {
        if out.is_null() {
            return fail(SmjdStatus::NullPointer, "null output pointer");
        }
        *out = Box::into_raw(Box::new(SmjdConfig(ExperimentConfig::example(experiment.into(), seed))));
        SmjdStatus::Ok
    })
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn smjd_config_set_seed(config: *mut SmjdConfig, seed: u64) -> SmjdStatus {
    guard(|| match config.as_mut() {
        Some(c) => {
            c.0.seed = seed;
            SmjdStatus::Ok
        }
        None => fail(SmjdStatus::NullPointer, "null config"),
    })
}

/// Set the number of Monte Carlo paths.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn smjd_config_set_paths(config: *mut SmjdConfig, n_paths: u64) -> SmjdStatus {
    guard(|| match config.as_mut() {
        Some(c) => {
            c.0.numeric.n_paths = n_paths as usize;
            SmjdStatus::Ok
        }
        None => fail(SmjdStatus::NullPointer, "null config"),
    })
}

/// Serialize the configuration; free the result with [`smjd_string_free`].
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smjd_config_to_json(config: *const SmjdConfig, out: *mut *mut c_char) -> SmjdStatus {
    guard(|| {
        let (Some(c), false) = (config.as_ref(), out.is_null()) else {
            return fail(SmjdStatus::NullPointer, "null argument");
        };
        let s = serde_json::to_string_pretty(&c.0).expect("config serializes");
        *out = CString::new(s).expect("json has no NUL").into_raw();
        SmjdStatus::Ok
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smjd_config_free(config: *mut SmjdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Run an experiment and write its result files into `out_dir`. `passed`
/// receives the acceptance verdict when the run completes.
///
/// # Safety
/// `config` must be a live handle, `out_dir` a NUL-terminated path and
/// `passed` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smjd_run(
    config: *const SmjdConfig,
    experiment: SmjdExperiment,
    out_dir: *const c_char,
    passed: *mut bool,
) -> SmjdStatus {
    guard(|| {
        let (Some(c), false) = (config.as_ref(), passed.is_null()) else {
            return fail(SmjdStatus::NullPointer, "null argument");
        };
        let dir = match read_str(out_dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match run_experiment(experiment.into(), &c.0, Path::new(dir)) {
            Ok(o) => {
                *passed = o.pass;
                SmjdStatus::Ok
            }
            Err(e @ RunError::Config(_)) => fail(SmjdStatus::InvalidInput, e.to_string()),
            Err(e @ RunError::Runtime(_)) => fail(SmjdStatus::Runtime, e.to_string()),
            Err(e @ RunError::Io(_)) => fail(SmjdStatus::Io, e.to_string()),
        }
    })
}

/// Regime model from a row-major `n × n` jump kernel and `n` holding laws.
///
/// # Safety
/// `kernel` must point to `n*n` doubles, `holding` to `n` entries and `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn smjd_regime_model_new(
    n: usize,
    kernel: *const f64,
    holding: *const SmjdHolding,
    out: *mut *mut SmjdRegimeModel,
) -> SmjdStatus {
    guard(|| {
        if kernel.is_null() || holding.is_null() || out.is_null() {
            return fail(SmjdStatus::NullPointer, "null argument");
        }
        if n == 0 {
            return fail(SmjdStatus::InvalidInput, "need at least one state");
        }
        let k = std::slice::from_raw_parts(kernel, n * n);
        let rows = k.chunks(n).map(<[f64]>::to_vec).collect();
        let laws = std::slice::from_raw_parts(holding, n)
            .iter()
            .map(|h| match h.law {
                SmjdHoldingLaw::Exponential => HoldingDist::Exponential { rate: h.a },
                SmjdHoldingLaw::Weibull => HoldingDist::Weibull { shape: h.a, scale: h.b },
            })
            .collect();
        match RegimeModel::new(rows, laws) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(SmjdRegimeModel(m)));
                SmjdStatus::Ok
            }
            Err(e) => fail(SmjdStatus::InvalidInput, e.to_string()),
        }
    })
}

/// Hazard rate of `state` at `age`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smjd_regime_hazard(model: *const SmjdRegimeModel, state: usize, age: f64, out: *mut f64) -> SmjdStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            return fail(SmjdStatus::NullPointer, "null argument");
        };
        if state >= m.0.num_states() {
            return fail(SmjdStatus::InvalidInput, format!("state {state} out of range"));
        }
        match m.0.hazard_rate(state, age) {
            Ok(h) => {
                *out = h;
                SmjdStatus::Ok
            }
            Err(e) => runtime(e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smjd_regime_model_free(model: *mut SmjdRegimeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Power-utility model with `regimes` entries in each of `r`, `mu`, `sigma`.
///
/// # Safety
/// `r`, `mu`, `sigma` must point to `regimes` doubles each and `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn smjd_rs_model_new(
    regimes: usize,
    r: *const f64,
    mu: *const f64,
    sigma: *const f64,
    gamma: f64,
    horizon: f64,
    out: *mut *mut SmjdRsModel,
) -> SmjdStatus {
    guard(|| {
        if r.is_null() || mu.is_null() || sigma.is_null() || out.is_null() {
            return fail(SmjdStatus::NullPointer, "null argument");
        }
        let v = |p: *const f64| std::slice::from_raw_parts(p, regimes).to_vec();
        match RiskSensitiveModel::new(v(r), v(mu), v(sigma), gamma, horizon) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(SmjdRsModel(m)));
                SmjdStatus::Ok
            }
            Err(e) => fail(SmjdStatus::InvalidInput, e.to_string()),
        }
    })
}

/// Closed-form control at wealth `x` in `regime`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smjd_rs_optimal_control(
    model: *const SmjdRsModel,
    t: f64,
    x: f64,
    regime: usize,
    out: *mut f64,
) -> SmjdStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            return fail(SmjdStatus::NullPointer, "null argument");
        };
        if regime >= m.0.regimes() {
            return fail(SmjdStatus::InvalidInput, format!("regime {regime} out of range"));
        }
        match rs_optimal_control(&m.0, t, x, regime) {
            Ok(u) => {
                *out = u;
                SmjdStatus::Ok
            }
            Err(e) => runtime(e),
        }
    })
}

/// Monte Carlo `φ(t, i, y)` of the power-utility model (integral form).
///
/// # Safety
/// `model` and `regime_model` must be live handles and `out` a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn smjd_rs_phi(
    model: *const SmjdRsModel,
    regime_model: *const SmjdRegimeModel,
    t: f64,
    regime: usize,
    age: f64,
    n_paths: u64,
    seed: u64,
    out: *mut SmjdEstimate,
) -> SmjdStatus {
    guard(|| {
        let (Some(m), Some(rm), false) = (model.as_ref(), regime_model.as_ref(), out.is_null()) else {
            return fail(SmjdStatus::NullPointer, "null argument");
        };
        if regime >= rm.0.num_states() {
            return fail(SmjdStatus::InvalidInput, format!("regime {regime} out of range"));
        }
        match rs_phi(&m.0, &rm.0, RegimeSampler::Direct, t, regime, age, n_paths as usize, seed, PhiVariant::Integral) {
            Ok(e) => {
                *out = SmjdEstimate {
                    mean: e.mean,
                    se: e.se,
                    n: e.n as u64,
                };
                SmjdStatus::Ok
            }
            Err(e) => runtime(e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smjd_rs_model_free(model: *mut SmjdRsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
