use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use llmnet_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = llmnet_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = CStr::from_ptr(p).to_string_lossy().into_owned();
    llmnet_string_free(p);
    s
}

#[test]
fn run_prop1_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(llmnet_config_default(cstr("prop1").as_ptr(), &mut cfg), LlmnetStatus::Ok);
        assert_eq!(llmnet_config_set_seed(cfg, 7), LlmnetStatus::Ok);
        let out = dir.path().join("p1");
        assert_eq!(llmnet_config_set_out(cfg, cstr(out.to_str().unwrap()).as_ptr()), LlmnetStatus::Ok);
        assert_eq!(llmnet_config_set_jobs(cfg, 2), LlmnetStatus::Ok);
        assert_eq!(llmnet_config_validate(cfg), LlmnetStatus::Ok);

        let mut run = ptr::null_mut();
        assert_eq!(llmnet_run(cfg, &mut run), LlmnetStatus::Ok);
        assert!(llmnet_run_wall_time(run) >= 0.0);
        let n = llmnet_run_artifact_count(run);
        assert_eq!(n, 2, "prop1.csv and config.toml");
        let (mut path, mut sha) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(llmnet_run_artifact(run, 0, &mut path, &mut sha), LlmnetStatus::Ok);
        let path = take(path);
        assert!(path.ends_with("prop1.csv") && Path::new(&path).is_file());
        assert_eq!(take(sha).len(), 64);
        assert_eq!(llmnet_run_artifact(run, n, ptr::null_mut(), ptr::null_mut()), LlmnetStatus::OutOfRange);
        assert!(last_error().contains("out of range"));

        let summary = take(llmnet_run_summary_json(run));
        assert!(summary.contains("\"pass\":true"), "{summary}");

        let mut written = 0usize;
        assert_eq!(llmnet_emit_plotdata(cstr(out.to_str().unwrap()).as_ptr(), &mut written), LlmnetStatus::Ok);
        assert_eq!(written, 1);

        llmnet_run_free(run);
        llmnet_config_free(cfg);
    }
}

#[test]
fn toml_round_trip_and_errors() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let text = cstr("kind = \"sweep\"\nseed = 9\n");
        assert_eq!(llmnet_config_from_toml(text.as_ptr(), &mut cfg), LlmnetStatus::Ok);
        let echo = take(llmnet_config_to_toml(cfg));
        let mut again = ptr::null_mut();
        assert_eq!(llmnet_config_from_toml(cstr(&echo).as_ptr(), &mut again), LlmnetStatus::Ok);
        assert_eq!(take(llmnet_config_to_toml(again)), echo);
        llmnet_config_free(again);
        llmnet_config_free(cfg);

        let mut bad = ptr::null_mut();
        let st = llmnet_config_from_toml(cstr("kind = \"sweep\"\n[sweep]\ntrails = 3\n").as_ptr(), &mut bad);
        assert_eq!(st, LlmnetStatus::ConfigError);
        assert!(last_error().contains("line 3"), "{}", last_error());
        assert!(bad.is_null());

        assert_eq!(llmnet_config_default(cstr("nope").as_ptr(), &mut bad), LlmnetStatus::ConfigError);
        assert_eq!(llmnet_config_default(ptr::null(), &mut bad), LlmnetStatus::NullPointer);
        assert_eq!(llmnet_config_validate(ptr::null()), LlmnetStatus::NullPointer);

        // B1 violation is refused before anything runs
        let text = cstr("kind = \"prop1\"\n[prop1.scenario.grading]\nmu_t = 0.5\nmu_h = 0.9\n");
        assert_eq!(llmnet_config_from_toml(text.as_ptr(), &mut cfg), LlmnetStatus::Ok);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("never");
        llmnet_config_set_out(cfg, cstr(out.to_str().unwrap()).as_ptr());
        let mut run = ptr::null_mut();
        assert_eq!(llmnet_run(cfg, &mut run), LlmnetStatus::ConfigError);
        assert!(last_error().contains("B1"));
        assert!(!out.exists());
        llmnet_config_free(cfg);

        let mut bad_utf8 = vec![0xffu8, 0xfe, 0];
        let st = llmnet_config_default(bad_utf8.as_mut_ptr() as *const _, &mut bad);
        assert_eq!(st, LlmnetStatus::InvalidUtf8);
    }
}

#[test]
fn last_error_is_thread_local() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(llmnet_config_default(cstr("nope").as_ptr(), &mut cfg), LlmnetStatus::ConfigError);
    }
    let other = std::thread::spawn(|| llmnet_last_error().is_null()).join().unwrap();
    assert!(other);
    assert!(last_error().contains("nope"));
}

#[test]
fn numeric_helpers() {
    unsafe {
        let mut d = f64::NAN;
        assert_eq!(llmnet_delta1_bound(64, 0.001, 0.001, &mut d), LlmnetStatus::Ok);
        assert!(d > 0.0 && d < 1.0);
        let (mut lo, mut hi) = (0.0, 0.0);
        assert_eq!(llmnet_wilson_interval(1000, 1000, &mut lo, &mut hi), LlmnetStatus::Ok);
        assert!(lo > 0.99 && hi <= 1.0);
        assert_eq!(llmnet_wilson_interval(3, 2, &mut lo, &mut hi), LlmnetStatus::OutOfRange);
    }
}

#[test]
fn header_is_generated_and_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/llmnet.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["llmnet_run(", "llmnet_last_error(", "LLMNET_STATUS_CONFIG_ERROR", "typedef struct LlmnetConfig LlmnetConfig"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    match Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).status() {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler; skipped syntax check"),
    }
}
