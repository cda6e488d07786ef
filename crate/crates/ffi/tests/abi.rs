use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use smjd_ffi::*;

fn last_error() -> String {
    let p = smjd_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn config_round_trip_and_errors() {
    unsafe {
        let mut c: *mut SmjdConfig = ptr::null_mut();
        assert_eq!(smjd_config_default(SmjdExperiment::Hjb, 9, &mut c), SmjdStatus::Ok);
        assert_eq!(smjd_config_set_seed(c, 11), SmjdStatus::Ok);
        let mut json: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(smjd_config_to_json(c, &mut json), SmjdStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        smjd_string_free(json);
        assert!(text.contains("\"seed\": 11"));

        let mut d: *mut SmjdConfig = ptr::null_mut();
        let s = CString::new(text).unwrap();
        assert_eq!(smjd_config_from_json(s.as_ptr(), &mut d), SmjdStatus::Ok);
        smjd_config_free(d);
        smjd_config_free(c);

        let bad = CString::new(r#"{"experiment": "hjb"}"#).unwrap();
        let mut e: *mut SmjdConfig = ptr::null_mut();
        assert_eq!(smjd_config_from_json(bad.as_ptr(), &mut e), SmjdStatus::InvalidInput);
        assert!(e.is_null());
        assert!(last_error().contains("seed"));

        assert_eq!(smjd_config_from_json(ptr::null(), &mut e), SmjdStatus::NullPointer);
        assert_eq!(smjd_config_set_seed(ptr::null_mut(), 1), SmjdStatus::NullPointer);
    }
}

#[test]
fn models_and_closed_forms() {
    unsafe {
        let (r, mu, sigma) = ([0.05, 0.02], [0.13, 0.08], [0.2, 0.3]);
        let mut m: *mut SmjdRsModel = ptr::null_mut();
        assert_eq!(smjd_rs_model_new(2, r.as_ptr(), mu.as_ptr(), sigma.as_ptr(), 0.5, 1.0, &mut m), SmjdStatus::Ok);
        let mut u = 0.0;
        assert_eq!(smjd_rs_optimal_control(m, 0.0, 2.0, 0, &mut u), SmjdStatus::Ok);
        // m̄ = 0.4, û = m̄ x / ((1 − γ) σ)
        assert!((u - 0.4 * 2.0 / (0.5 * 0.2)).abs() < 1e-12);
        assert_eq!(smjd_rs_optimal_control(m, 0.0, 2.0, 2, &mut u), SmjdStatus::InvalidInput);

        let kernel = [0.0, 1.0, 1.0, 0.0];
        let laws = [
            SmjdHolding { law: SmjdHoldingLaw::Exponential, a: 2.0, b: 0.0 },
            SmjdHolding { law: SmjdHoldingLaw::Weibull, a: 2.0, b: 1.0 },
        ];
        let mut g: *mut SmjdRegimeModel = ptr::null_mut();
        assert_eq!(smjd_regime_model_new(2, kernel.as_ptr(), laws.as_ptr(), &mut g), SmjdStatus::Ok);
        let mut h = 0.0;
        assert_eq!(smjd_regime_hazard(g, 0, 0.7, &mut h), SmjdStatus::Ok);
        assert_eq!(h, 2.0);
        assert_eq!(smjd_regime_hazard(g, 1, 0.5, &mut h), SmjdStatus::Ok);
        assert!((h - 1.0).abs() < 1e-12);

        let mut e = SmjdEstimate::default();
        assert_eq!(smjd_rs_phi(m, g, 1.0, 0, 0.0, 10, 1, &mut e), SmjdStatus::Ok);
        assert_eq!((e.mean, e.se), (0.0, 0.0));
        assert_eq!(smjd_rs_phi(m, g, 0.0, 1, 0.0, 500, 1, &mut e), SmjdStatus::Ok);
        assert!(e.mean > 0.0 && e.se > 0.0 && e.n == 500);

        let bad = [0.0, 0.5, 1.0, 0.0];
        let mut b: *mut SmjdRegimeModel = ptr::null_mut();
        assert_eq!(smjd_regime_model_new(2, bad.as_ptr(), laws.as_ptr(), &mut b), SmjdStatus::InvalidInput);
        assert!(!last_error().is_empty());

        smjd_regime_model_free(g);
        smjd_rs_model_free(m);
    }
}

#[test]
fn run_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut c: *mut SmjdConfig = ptr::null_mut();
        smjd_config_default(SmjdExperiment::Hjb, 1, &mut c);
        let mut passed = false;
        assert_eq!(smjd_run(c, SmjdExperiment::Hjb, out.as_ptr(), &mut passed), SmjdStatus::Ok);
        assert!(passed);
        assert_eq!(smjd_run(c, SmjdExperiment::Simulate, out.as_ptr(), &mut passed), SmjdStatus::InvalidInput);
        smjd_config_free(c);
    }
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/smjd.h")).unwrap();
    for f in [
        "smjd_last_error_message",
        "smjd_version",
        "smjd_string_free",
        "smjd_config_from_json",
        "smjd_config_default",
        "smjd_config_set_seed",
        "smjd_config_set_paths",
        "smjd_config_to_json",
        "smjd_config_free",
        "smjd_run",
        "smjd_regime_model_new",
        "smjd_regime_hazard",
        "smjd_regime_model_free",
        "smjd_rs_model_new",
        "smjd_rs_optimal_control",
        "smjd_rs_phi",
        "smjd_rs_model_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f}");
    }
}

/// Compile the C demo against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // tests live in target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libsmjd_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("demo");
    let status = Command::new("cc")
        .arg(manifest.join("c/demo.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&bin).arg(dir.path().join("out")).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("u = 4.000000"), "{stdout}");
    assert!(stdout.contains("hjb: status 0, passed 1"), "{stdout}");
}
