use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use sobolev_growth::fields::FourierVectorField;
use sobolev_growth_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sg_last_error()) }.to_string_lossy().into_owned()
}

fn gradient() -> *mut SgField {
    let v = FourierVectorField::builder(2).sin(0, [1, 0], 0, 1.0).sin(1, [0, 1], 0, 1.0).build().unwrap();
    let json = CString::new(v.to_json().to_string()).unwrap();
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { sg_field_from_json(json.as_ptr(), &mut f) }, SgStatus::Ok, "{}", last_error());
    assert!(!f.is_null());
    f
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(sg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn field_eval_and_ms_check() {
    let f = gradient();
    let mut out = [0.0; 2];
    let x = [0.5, 1.0];
    assert_eq!(unsafe { sg_field_eval(f, 0.0, x.as_ptr(), out.as_mut_ptr()) }, SgStatus::Ok);
    assert!((out[0] - 0.5f64.sin()).abs() < 1e-14 && (out[1] - 1.0f64.sin()).abs() < 1e-14);
    let mut verdict = SgVerdict::Inconclusive;
    assert_eq!(unsafe { sg_ms_check(f, 7, &mut verdict) }, SgStatus::Ok);
    assert_eq!(verdict, SgVerdict::CertifiedMs);
    unsafe { sg_field_free(f) };
}

#[test]
fn null_and_malformed_inputs() {
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { sg_field_from_json(ptr::null(), &mut f) }, SgStatus::NullPointer);
    let json = CString::new("{not json").unwrap();
    assert_eq!(unsafe { sg_field_from_json(json.as_ptr(), &mut f) }, SgStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { sg_field_from_json(json.as_ptr(), ptr::null_mut()) }, SgStatus::NullPointer);
    let mut v = SgVerdict::Inconclusive;
    assert_eq!(unsafe { sg_ms_check(ptr::null(), 0, &mut v) }, SgStatus::NullPointer);
    assert_eq!(unsafe { sg_solution_len(ptr::null()) }, 0);
    // freeing null is a no-op
    unsafe {
        sg_field_free(ptr::null_mut());
        sg_state_free(ptr::null_mut());
        sg_solution_free(ptr::null_mut());
    }
    let c = [0.0, 0.0];
    let mut s = ptr::null_mut();
    let st = unsafe { sg_state_wave_packet(3, 8, 8, c.as_ptr(), c.as_ptr(), c.as_ptr(), 1.0, &mut s) };
    assert_eq!(st, SgStatus::InvalidArgument);
}

#[test]
fn solve_grows_on_the_saddle() {
    let f = gradient();
    let center = [0.0, std::f64::consts::PI];
    let width = [1.5, 0.5];
    let xi0 = [1.0, 0.0];
    let mut u0 = ptr::null_mut();
    let st = unsafe { sg_state_wave_packet(2, 48, 24, center.as_ptr(), width.as_ptr(), xi0.as_ptr(), 1.0, &mut u0) };
    assert_eq!(st, SgStatus::Ok, "{}", last_error());
    let mut n = 0.0;
    assert_eq!(unsafe { sg_state_sobolev_norm(u0, 0.0, &mut n) }, SgStatus::Ok);
    let sigmas = [0.5];
    let mut sol = ptr::null_mut();
    let st = unsafe { sg_solve(f, ptr::null(), 0.0, u0, 3.0, 0.1, sigmas.as_ptr(), 1, &mut sol) };
    assert_eq!(st, SgStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { sg_solution_len(sol) }, 31);
    let (mut t, mut l2, mut h) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { sg_solution_sample(sol, 30, 0, &mut t, &mut l2, &mut h) }, SgStatus::Ok);
    assert!((t - 3.0).abs() < 1e-12);
    assert!((l2 / n - 1.0).abs() < 1e-6);
    assert_eq!(unsafe { sg_solution_sample(sol, 31, 0, &mut t, &mut l2, &mut h) }, SgStatus::InvalidArgument);
    let mut rate = 0.0;
    assert_eq!(unsafe { sg_solution_fit_rate(sol, 0.5, 1.0, 3.0, &mut rate) }, SgStatus::Ok);
    assert!(rate > 0.2, "rate {rate}");
    unsafe {
        sg_solution_free(sol);
        sg_state_free(u0);
        sg_field_free(f);
    }
}

#[test]
fn scenario_runner_reports_refutation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "name = \"c\"\n[field]\nconstant = [1.0, 0.5]\n[ms]\nseed_grid = 8\nomega_starts = 10\n").unwrap();
    let p = CString::new(path.to_str().unwrap()).unwrap();
    let out = CString::new(dir.path().join("out").to_str().unwrap()).unwrap();
    let verb = CString::new("ms-check").unwrap();
    assert_eq!(unsafe { sg_run_scenario(p.as_ptr(), verb.as_ptr(), out.as_ptr()) }, SgStatus::Refuted);
    assert!(dir.path().join("out/manifest.json").exists());
    let bogus = CString::new("fly").unwrap();
    assert_eq!(unsafe { sg_run_scenario(p.as_ptr(), bogus.as_ptr(), out.as_ptr()) }, SgStatus::InvalidArgument);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sobolev_growth.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["sg_solve", "sg_field_free", "sg_run_scenario", "SG_STATUS_REFUTED", "typedef struct SgField SgField"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let Ok(status) = Command::new(&cc).args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).status() else {
        eprintln!("no C compiler found; skipping syntax check");
        return;
    };
    assert!(status.success());
}
