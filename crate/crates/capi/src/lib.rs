//! C ABI for the survey-integration library.
//!
//! Handles are opaque pointers owned by this library; every constructor has
//! a matching `_free`. Functions return `SURVINT_OK` (0) on success or a
//! nonzero error code, with a thread-local message available through
//! `survint_last_error_message`. Pointer-returning functions return null on
//! failure.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::path::Path;
use std::ptr;

use survint::dataset::{load_sample, PopulationFacts, SampleRole, SampleSchema, SurveySample};
use survint::error::SurvintError;
use survint::pipeline::{fit_scenario, PipelineOptions, SamplePair};
use survint::posterior::{PosteriorDraws, ScenarioKind};
use survint::prediction::surrogate_mean_draws;

/// Success.
pub const SURVINT_OK: c_int = 0;
/// Invalid arguments or usage.
pub const SURVINT_ERR_USAGE: c_int = 1;
/// Input data failed validation.
pub const SURVINT_ERR_DATA: c_int = 2;
/// A numerical procedure failed.
pub const SURVINT_ERR_NUMERIC: c_int = 3;
/// A required pointer was null or a string was not valid UTF-8.
pub const SURVINT_ERR_POINTER: c_int = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_of(err: &SurvintError) -> c_int {
    match err.exit_code() {
        1 => SURVINT_ERR_USAGE,
        2 => SURVINT_ERR_DATA,
        _ => SURVINT_ERR_NUMERIC,
    }
}

/// Message for the most recent error on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn survint_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn survint_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// An opaque loaded sample.
pub struct SurvintSample {
    inner: SurveySample,
}

/// Opaque joint posterior draws of `(beta, sigma2, a)`.
pub struct SurvintDraws {
    inner: PosteriorDraws,
}

/// Posterior summary of the finite population mean.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct SurvintSummary {
    pub pm: c_double,
    pub psd: c_double,
    pub pcv: c_double,
    pub nse: c_double,
    pub hpd_lower: c_double,
    pub hpd_upper: c_double,
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok()
}

/// Load a sample from a headered CSV.
///
/// `role` is 0 for the non-probability sample and 1 for the probability
/// sample; `weight_column` may be null for an nps; `study_columns` is an
/// array of `n_study` column names; `intercept` nonzero prepends a constant
/// column. Returns null on failure.
///
/// # Safety
/// All non-null pointers must reference valid NUL-terminated strings, and
/// `study_columns` must point to `n_study` such pointers.
#[no_mangle]
pub unsafe extern "C" fn survint_sample_load_csv(
    path: *const c_char,
    role: c_int,
    response_column: *const c_char,
    weight_column: *const c_char,
    study_columns: *const *const c_char,
    n_study: usize,
    intercept: c_int,
) -> *mut SurvintSample {
    let (Some(path), Some(response)) = (cstr(path), cstr(response_column)) else {
        set_error("null or non-utf8 path/response");
        return ptr::null_mut();
    };
    let weight = if weight_column.is_null() {
        None
    } else {
        match cstr(weight_column) {
            Some(w) => Some(w),
            None => {
                set_error("non-utf8 weight column");
                return ptr::null_mut();
            }
        }
    };
    if study_columns.is_null() && n_study > 0 {
        set_error("null study column array");
        return ptr::null_mut();
    }
    let mut study = Vec::with_capacity(n_study);
    for i in 0..n_study {
        match cstr(*study_columns.add(i)) {
            Some(s) => study.push(s),
            None => {
                set_error("null or non-utf8 study column name");
                return ptr::null_mut();
            }
        }
    }
    let mut schema = SampleSchema::new(response, weight, &study);
    schema.intercept = intercept != 0;
    let role = if role == 0 { SampleRole::Nps } else { SampleRole::Ps };
    match load_sample(Path::new(path), &schema, role) {
        Ok(s) => Box::into_raw(Box::new(SurvintSample { inner: s })),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `sample` must come from `survint_sample_load_csv` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn survint_sample_free(sample: *mut SurvintSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Number of rows in a loaded sample; 0 for a null handle.
///
/// # Safety
/// `sample` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn survint_sample_rows(sample: *const SurvintSample) -> usize {
    sample.as_ref().map_or(0, |s| s.inner.n())
}

/// Fit one scenario (letter `'B'`, `'C'`, `'D'`, `'E'` or `'G'`) and return
/// posterior draws. Null on failure.
///
/// # Safety
/// Both handles must be live sample handles.
#[no_mangle]
pub unsafe extern "C" fn survint_fit(
    nps: *const SurvintSample,
    ps: *const SurvintSample,
    scenario: c_char,
    grid_size: usize,
    draws: usize,
    seed: u64,
    a_min: c_double,
    a_max: c_double,
) -> *mut SurvintDraws {
    let (Some(nps), Some(ps)) = (nps.as_ref(), ps.as_ref()) else {
        set_error("null sample handle");
        return ptr::null_mut();
    };
    let kind = match ScenarioKind::from_letter(scenario as u8 as char) {
        Ok(k) => k,
        Err(e) => {
            set_error(&e.to_string());
            return ptr::null_mut();
        }
    };
    let pair = match SamplePair::from_samples(&nps.inner, &ps.inner) {
        Ok(p) => p,
        Err(e) => {
            set_error(&e.to_string());
            return ptr::null_mut();
        }
    };
    let opts = PipelineOptions {
        grid_size: if grid_size == 0 { 1000 } else { grid_size },
        draws: if draws == 0 { 10_000 } else { draws },
        a_min,
        a_max,
        ..Default::default()
    };
    match fit_scenario(&pair, kind, &opts, seed) {
        Ok(fit) => Box::into_raw(Box::new(SurvintDraws { inner: fit.draws })),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `draws` must come from `survint_fit` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn survint_draws_free(draws: *mut SurvintDraws) {
    if !draws.is_null() {
        drop(Box::from_raw(draws));
    }
}

/// Number of retained draws; 0 for null.
///
/// # Safety
/// `draws` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn survint_draws_len(draws: *const SurvintDraws) -> usize {
    draws.as_ref().map_or(0, |d| d.inner.m())
}

/// Number of regression coefficients; 0 for null.
///
/// # Safety
/// `draws` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn survint_draws_coefficients(draws: *const SurvintDraws) -> usize {
    draws.as_ref().map_or(0, |d| d.inner.p())
}

unsafe fn copy_column(
    out: *mut c_double,
    capacity: usize,
    len: usize,
    get: impl Fn(usize) -> f64,
) -> c_int {
    if out.is_null() {
        set_error("null output buffer");
        return SURVINT_ERR_POINTER;
    }
    if capacity < len {
        set_error("output buffer too small");
        return SURVINT_ERR_USAGE;
    }
    for k in 0..len {
        *out.add(k) = get(k);
    }
    SURVINT_OK
}

/// Copy the discount-factor draws into `out` (capacity >= draw count).
///
/// # Safety
/// `draws` must be live; `out` must point to at least `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn survint_draws_get_a(
    draws: *const SurvintDraws,
    out: *mut c_double,
    capacity: usize,
) -> c_int {
    let Some(d) = draws.as_ref() else {
        set_error("null draws handle");
        return SURVINT_ERR_POINTER;
    };
    copy_column(out, capacity, d.inner.m(), |k| d.inner.a[k])
}

/// Copy the variance draws into `out` (capacity >= draw count).
///
/// # Safety
/// `draws` must be live; `out` must point to at least `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn survint_draws_get_sigma2(
    draws: *const SurvintDraws,
    out: *mut c_double,
    capacity: usize,
) -> c_int {
    let Some(d) = draws.as_ref() else {
        set_error("null draws handle");
        return SURVINT_ERR_POINTER;
    };
    copy_column(out, capacity, d.inner.m(), |k| d.inner.sigma2[k])
}

/// Copy coefficient `j`'s draws into `out` (capacity >= draw count).
///
/// # Safety
/// `draws` must be live; `out` must point to at least `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn survint_draws_get_beta(
    draws: *const SurvintDraws,
    j: usize,
    out: *mut c_double,
    capacity: usize,
) -> c_int {
    let Some(d) = draws.as_ref() else {
        set_error("null draws handle");
        return SURVINT_ERR_POINTER;
    };
    if j >= d.inner.p() {
        set_error("coefficient index out of range");
        return SURVINT_ERR_USAGE;
    }
    copy_column(out, capacity, d.inner.m(), |k| d.inner.beta[(k, j)])
}

/// Posterior summary of the finite population mean under external facts:
/// `n_hat` and the `p` covariate means in `xbar`.
///
/// # Safety
/// `draws` must be live; `xbar` must point to `p` doubles; `summary_out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn survint_predict_mean(
    draws: *const SurvintDraws,
    n_hat: c_double,
    xbar: *const c_double,
    p: usize,
    summary_out: *mut SurvintSummary,
) -> c_int {
    let Some(d) = draws.as_ref() else {
        set_error("null draws handle");
        return SURVINT_ERR_POINTER;
    };
    if xbar.is_null() || summary_out.is_null() {
        set_error("null xbar or summary pointer");
        return SURVINT_ERR_POINTER;
    }
    let xbar: Vec<f64> = (0..p).map(|j| *xbar.add(j)).collect();
    let facts = match PopulationFacts::external(n_hat, xbar) {
        Ok(f) => f,
        Err(e) => {
            set_error(&e.to_string());
            return code_of(&e);
        }
    };
    match surrogate_mean_draws(&d.inner, &facts) {
        Ok(mp) => {
            *summary_out = SurvintSummary {
                pm: mp.summary.pm,
                psd: mp.summary.psd,
                pcv: mp.summary.pcv,
                nse: mp.summary.nse,
                hpd_lower: mp.summary.hpd_lower,
                hpd_upper: mp.summary.hpd_upper,
            };
            SURVINT_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            code_of(&e)
        }
    }
}
