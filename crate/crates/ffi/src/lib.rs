//! C ABI over `cpe-core` elicitation sessions.
//!
//! Fallible calls return a [`CpeStatus`]. On failure a message is kept per
//! thread and read with [`cpe_last_error_message`]. Strings handed out through
//! `out` pointers belong to the caller and are released with
//! [`cpe_string_free`]; sessions with [`cpe_session_free`].
//!
//! Payloads are the JSON documents served by the HTTP API.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cpe_core::elicit::SessionState;
use cpe_core::learning::{nll, nll_grad, update_factor_at, UpdateRule};
use cpe_core::service::{query_payload, state_payload, synthesis_payload, CreateRequest};
use cpe_core::types::{FeatureVector, Label, WeightVector};
use cpe_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CpeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    StaleQuery = 3,
    Finished = 4,
    Degenerate = 5,
    Io = 6,
    Internal = 7,
    Panic = 8,
}

pub const CPE_RULE_SP: u32 = 0;
pub const CPE_RULE_PP: u32 = 1;
pub const CPE_RULE_MLE: u32 = 2;
pub const CPE_RULE_MLE_BATCH: u32 = 3;

pub const CPE_LABEL_RIGHT: i32 = -1;
pub const CPE_LABEL_INDIFFERENT: i32 = 0;
pub const CPE_LABEL_LEFT: i32 = 1;

/// Opaque session handle.
pub struct CpeSession {
    state: SessionState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Failure = (CpeStatus, String);

fn status_of(e: &Error) -> CpeStatus {
    match e {
        Error::StaleQuery { .. } => CpeStatus::StaleQuery,
        Error::Finished => CpeStatus::Finished,
        Error::EmptyPool | Error::DegeneratePool | Error::Infeasible(_) | Error::DegenerateRegret { .. } => {
            CpeStatus::Degenerate
        }
        Error::Io(_) => CpeStatus::Io,
        Error::Invalid(_)
        | Error::Json(_)
        | Error::DimensionMismatch { .. }
        | Error::FormatVersion(_)
        | Error::CapExceeded { .. }
        | Error::SolverCap { .. } => CpeStatus::InvalidArgument,
        _ => CpeStatus::Internal,
    }
}

fn fail(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CpeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CpeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            CpeStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    (CpeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| (CpeStatus::Internal, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

/// Creates a session from a JSON request `{problem, problem_params,
/// loop_config, seed}`.
///
/// # Safety
/// `request_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpe_session_create(request_json: *const c_char, out: *mut *mut CpeSession) -> CpeStatus {
    guard(|| {
        if request_json.is_null() {
            return Err(null("request_json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = CStr::from_ptr(request_json)
            .to_str()
            .map_err(|e| (CpeStatus::InvalidArgument, format!("request is not UTF-8: {e}")))?;
        let req: CreateRequest = serde_json::from_str(text).map_err(|e| fail(e.into()))?;
        let state = req.open().map_err(fail)?;
        *out = Box::into_raw(Box::new(CpeSession { state }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from [`cpe_session_create`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cpe_session_free(session: *mut CpeSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Writes the pending query as JSON, selecting one if none is pending.
///
/// # Safety
/// `session` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpe_session_next_query(session: *mut CpeSession, out_json: *mut *mut c_char) -> CpeStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let q = s.state.next_query().map_err(fail)?;
        let v = query_payload(&s.state, &q).map_err(fail)?;
        write_string(out_json, v.to_string())
    })
}

/// Answers query `query_id` with `label` (`CPE_LABEL_*`). `out_iteration`
/// may be null.
///
/// # Safety
/// `session` must be a live handle; `out_iteration` null or writable.
#[no_mangle]
pub unsafe extern "C" fn cpe_session_answer(
    session: *mut CpeSession,
    query_id: u64,
    label: i32,
    out_iteration: *mut u64,
) -> CpeStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let label = i8::try_from(label)
            .map_err(|_| Error::Invalid(format!("label {label}")))
            .and_then(Label::from_int)
            .map_err(fail)?;
        let out = s.state.submit(query_id, label).map_err(fail)?;
        if !out_iteration.is_null() {
            *out_iteration = out.iteration as u64;
        }
        Ok(())
    })
}

/// Writes `{iteration, steps, weights_mean, weights_std, history_counts,
/// finished}`.
///
/// # Safety
/// `session` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpe_session_state_json(session: *const CpeSession, out_json: *mut *mut c_char) -> CpeStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        write_string(out_json, state_payload(&s.state.snapshot()).to_string())
    })
}

/// Synthesizes for instance `instance_id` under the ensemble-mean weights; a
/// negative id selects the first test instance.
///
/// # Safety
/// `session` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpe_session_synthesize(
    session: *const CpeSession,
    instance_id: i64,
    out_json: *mut *mut c_char,
) -> CpeStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let setup = s.state.setup();
        let ctx = if instance_id < 0 { setup.test_contexts().first().copied().unwrap_or(0) } else { instance_id as usize };
        let v = synthesis_payload(setup, &s.state.ensemble().mean_weights(), ctx).map_err(fail)?;
        write_string(out_json, v.to_string())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cpe_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn cpe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

fn rule_of(code: u32) -> Option<UpdateRule> {
    match code {
        CPE_RULE_SP => Some(UpdateRule::SpOnline),
        CPE_RULE_PP => Some(UpdateRule::PpOnline),
        CPE_RULE_MLE => Some(UpdateRule::MleOnline),
        CPE_RULE_MLE_BATCH => Some(UpdateRule::MleBatch),
        _ => None,
    }
}

/// Update factor of `rule` at `margin = u(y+) - u(y-)`; NaN for an unknown
/// rule.
#[no_mangle]
pub extern "C" fn cpe_update_factor(rule: u32, margin: f64) -> f64 {
    rule_of(rule).map_or(f64::NAN, |r| update_factor_at(r, margin))
}

/// Negative log-likelihood of one preference and, when `out_grad` is not
/// null, its gradient (`n` values).
///
/// # Safety
/// `w` and `delta` must point to `n` readable doubles, `out_loss` to one
/// writable double, `out_grad` to `n` writable doubles or be null.
#[no_mangle]
pub unsafe extern "C" fn cpe_nll(
    w: *const f64,
    delta: *const f64,
    n: usize,
    out_loss: *mut f64,
    out_grad: *mut f64,
) -> CpeStatus {
    guard(|| {
        if w.is_null() || delta.is_null() || out_loss.is_null() {
            return Err(null("w, delta or out_loss"));
        }
        if n == 0 {
            return Err((CpeStatus::InvalidArgument, "n must be positive".into()));
        }
        let wv = WeightVector::new(std::slice::from_raw_parts(w, n).to_vec()).map_err(fail)?;
        let dv = FeatureVector::new(std::slice::from_raw_parts(delta, n).to_vec()).map_err(fail)?;
        *out_loss = nll(&wv, &dv).map_err(fail)?;
        if !out_grad.is_null() {
            let g = nll_grad(&wv, &dv).map_err(fail)?;
            std::slice::from_raw_parts_mut(out_grad, n).copy_from_slice(g.values());
        }
        Ok(())
    })
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn cpe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
