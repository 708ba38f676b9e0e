use std::ffi::{CStr, CString};
use std::ptr;

use cpe_ffi::*;
use serde_json::Value;

const REQUEST: &str = r#"{"problem":"pctsp","problem_params":{"nodes":6},
  "loop_config":{"steps":3,"pool_size":300,"train_instances":2,"test_instances":1},"seed":5}"#;

fn create(req: &str) -> (CpeStatus, *mut CpeSession) {
    let c = CString::new(req).unwrap();
    let mut s = ptr::null_mut();
    let st = unsafe { cpe_session_create(c.as_ptr(), &mut s) };
    (st, s)
}

fn take(p: *mut std::ffi::c_char) -> Value {
    let v = serde_json::from_str(unsafe { CStr::from_ptr(p) }.to_str().unwrap()).unwrap();
    unsafe { cpe_string_free(p) };
    v
}

fn last_error() -> String {
    let p = cpe_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn next_query(s: *mut CpeSession) -> Value {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cpe_session_next_query(s, &mut out) }, CpeStatus::Ok);
    take(out)
}

#[test]
fn session_round_trip() {
    let (st, s) = create(REQUEST);
    assert_eq!(st, CpeStatus::Ok);
    let q = next_query(s);
    assert_eq!(next_query(s)["query_id"], q["query_id"]);
    assert_ne!(q["left"]["candidate_id"], q["right"]["candidate_id"]);
    assert_eq!(q["left"]["render"]["kind"], "tour");

    let mut it = 0u64;
    let id = q["query_id"].as_u64().unwrap();
    assert_eq!(unsafe { cpe_session_answer(s, id, CPE_LABEL_LEFT, &mut it) }, CpeStatus::Ok);
    assert_eq!(it, 1);
    assert_eq!(unsafe { cpe_session_answer(s, id, CPE_LABEL_LEFT, ptr::null_mut()) }, CpeStatus::StaleQuery);
    assert!(last_error().contains("stale"));

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cpe_session_state_json(s, &mut out) }, CpeStatus::Ok);
    let state = take(out);
    assert_eq!(state["iteration"], 1);
    assert_eq!(state["weights_mean"].as_array().unwrap().len(), 5);
    assert_eq!(state["history_counts"]["answered"], 1);

    for _ in 0..2 {
        let q = next_query(s);
        let id = q["query_id"].as_u64().unwrap();
        assert_eq!(unsafe { cpe_session_answer(s, id, CPE_LABEL_RIGHT, ptr::null_mut()) }, CpeStatus::Ok);
    }
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cpe_session_next_query(s, &mut out) }, CpeStatus::Finished);
    assert!(out.is_null());

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cpe_session_synthesize(s, -1, &mut out) }, CpeStatus::Ok);
    let syn = take(out);
    assert_eq!(syn["solver"], "exact");
    assert_eq!(syn["instance_id"], 2);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cpe_session_synthesize(s, 99, &mut out) }, CpeStatus::InvalidArgument);
    unsafe { cpe_session_free(s) };
}

#[test]
fn same_request_same_first_query() {
    let (_, a) = create(REQUEST);
    let (_, b) = create(REQUEST);
    assert_eq!(next_query(a), next_query(b));
    unsafe {
        cpe_session_free(a);
        cpe_session_free(b);
    }
}

#[test]
fn indifferent_answer_keeps_iteration() {
    let (_, s) = create(REQUEST);
    let q = next_query(s);
    let mut it = 99;
    let st = unsafe { cpe_session_answer(s, q["query_id"].as_u64().unwrap(), CPE_LABEL_INDIFFERENT, &mut it) };
    assert_eq!(st, CpeStatus::Ok);
    assert_eq!(it, 0);
    let q2 = next_query(s);
    assert_ne!(q2["query_id"], q["query_id"]);
    assert_eq!(q2["attempt"], 1);
    unsafe { cpe_session_free(s) };
}

#[test]
fn invalid_inputs() {
    let (st, s) = create(r#"{"problem":"knapsack"}"#);
    assert_eq!(st, CpeStatus::InvalidArgument);
    assert!(s.is_null());
    assert!(last_error().contains("knapsack"));

    let (st, _) = create("not json");
    assert_eq!(st, CpeStatus::InvalidArgument);

    let mut s = ptr::null_mut();
    assert_eq!(unsafe { cpe_session_create(ptr::null(), &mut s) }, CpeStatus::NullPointer);
    assert_eq!(unsafe { cpe_session_next_query(ptr::null_mut(), &mut ptr::null_mut()) }, CpeStatus::NullPointer);

    let (_, s) = create(REQUEST);
    let q = next_query(s);
    assert_eq!(
        unsafe { cpe_session_answer(s, q["query_id"].as_u64().unwrap(), 7, ptr::null_mut()) },
        CpeStatus::InvalidArgument
    );
    unsafe {
        cpe_session_free(s);
        cpe_session_free(ptr::null_mut());
        cpe_string_free(ptr::null_mut());
    }
}

#[test]
fn update_factor_closed_forms() {
    assert_eq!(cpe_update_factor(CPE_RULE_MLE, 0.0), 0.5);
    assert_eq!(cpe_update_factor(CPE_RULE_MLE_BATCH, 0.0), 0.5);
    assert_eq!(cpe_update_factor(CPE_RULE_PP, 3.0), 1.0);
    assert_eq!(cpe_update_factor(CPE_RULE_SP, 0.0), 0.0);
    assert_eq!(cpe_update_factor(CPE_RULE_SP, -0.1), 1.0);
    let x = 1.3f64;
    assert!((cpe_update_factor(CPE_RULE_MLE, x) - 1.0 / (1.0 + x.exp())).abs() < 1e-15);
    assert!(cpe_update_factor(42, 0.0).is_nan());
}

#[test]
fn nll_matches_closed_form() {
    let w = [0.5, -1.0, 2.0];
    let d = [1.0, 0.5, -0.25];
    let m: f64 = w.iter().zip(&d).map(|(a, b)| a * b).sum();
    let mut loss = 0.0;
    let mut grad = [0.0; 3];
    assert_eq!(unsafe { cpe_nll(w.as_ptr(), d.as_ptr(), 3, &mut loss, grad.as_mut_ptr()) }, CpeStatus::Ok);
    assert!((loss - (1.0 + (-m).exp()).ln()).abs() < 1e-14);
    let a = 1.0 / (1.0 + m.exp());
    for i in 0..3 {
        assert!((grad[i] + a * d[i]).abs() < 1e-14);
    }
    assert_eq!(unsafe { cpe_nll(w.as_ptr(), d.as_ptr(), 3, &mut loss, ptr::null_mut()) }, CpeStatus::Ok);
    assert_eq!(unsafe { cpe_nll(w.as_ptr(), d.as_ptr(), 0, &mut loss, ptr::null_mut()) }, CpeStatus::InvalidArgument);
    assert_eq!(unsafe { cpe_nll(ptr::null(), d.as_ptr(), 3, &mut loss, ptr::null_mut()) }, CpeStatus::NullPointer);
    let bad = [f64::NAN, 0.0, 0.0];
    assert_eq!(unsafe { cpe_nll(bad.as_ptr(), d.as_ptr(), 3, &mut loss, ptr::null_mut()) }, CpeStatus::InvalidArgument);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(cpe_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cpe.h")).unwrap();
    for f in [
        "cpe_session_create",
        "cpe_session_free",
        "cpe_session_next_query",
        "cpe_session_answer",
        "cpe_session_state_json",
        "cpe_session_synthesize",
        "cpe_string_free",
        "cpe_last_error_message",
        "cpe_update_factor",
        "cpe_nll",
        "cpe_version",
        "typedef struct CpeSession CpeSession",
        "CPE_STATUS_STALE_QUERY = 3",
    ] {
        assert!(h.contains(f), "{f} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let src = dir.join("use.c");
    std::fs::write(
        &src,
        "#include \"cpe.h\"\nint f(void) { CpeSession *s = 0; char *q = 0;\n\
         CpeStatus st = cpe_session_next_query(s, &q); return st == CPE_STATUS_OK && cpe_update_factor(CPE_RULE_MLE, 0.0) == 0.5; }\n",
    )
    .unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-c", "-o"])
        .arg(dir.join("use.o"))
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    for c in ["cc", "gcc", "clang"] {
        if std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(c);
        }
    }
    Err(())
}
