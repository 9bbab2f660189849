//! C interface to `sobolev-growth`.
//!
//! Objects cross the boundary as opaque handles created by `sg_*_new` or
//! `sg_*_from_*` functions and released by the matching `sg_*_free`. Every
//! fallible call returns an [`SgStatus`]; on failure the message is
//! available from [`sg_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::slice;

use sobolev_growth::cli::{self, RunOptions, Scenario, Verb};
use sobolev_growth::fields::FourierVectorField;
use sobolev_growth::msanalysis::{certify_morse_smale, MsParams, Verdict};
use sobolev_growth::quantize::{sobolev_norm, wave_packet, Bump, SpectralState};
use sobolev_growth::solver::{fit_growth_rate, solve, Equation, SimulationConfig, SolveOutput};
use sobolev_growth::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Scenario = 3,
    Numerical = 4,
    Io = 5,
    /// A certification ran and failed.
    Refuted = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgVerdict {
    CertifiedMs = 0,
    Refuted = 1,
    Inconclusive = 2,
}

/// Fourier vector field on the torus.
pub struct SgField(FourierVectorField);

/// Band-limited Fourier coefficients of a solution.
pub struct SgState(SpectralState);

/// Sampled norms and final state of a solve.
pub struct SgSolution(SolveOutput);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> SgStatus {
    match e {
        Error::Scenario(_) => SgStatus::Scenario,
        Error::Invalid(_) | Error::Json(_) => SgStatus::InvalidArgument,
        Error::Io(_) => SgStatus::Io,
        _ => SgStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), SgStatus>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside sobolev-growth");
            SgStatus::Panic
        }
    }
}

fn lib<T>(r: sobolev_growth::Result<T>) -> Result<T, SgStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

fn bad(msg: &str) -> SgStatus {
    set_error(msg);
    SgStatus::InvalidArgument
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SgStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(SgStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| bad(&format!("{what} is not UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, SgStatus> {
    p.as_ref().ok_or_else(|| {
        set_error(format!("{what} is null"));
        SgStatus::NullPointer
    })
}

unsafe fn out<'a, T>(p: *mut T) -> Result<&'a mut T, SgStatus> {
    p.as_mut().ok_or_else(|| {
        set_error("output pointer is null");
        SgStatus::NullPointer
    })
}

unsafe fn floats<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], SgStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(SgStatus::NullPointer);
    }
    Ok(slice::from_raw_parts(p, n))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a field from its JSON form.
///
/// # Safety
/// `json` must be NUL-terminated; `out_field` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_field_from_json(json: *const c_char, out_field: *mut *mut SgField) -> SgStatus {
    guard(|| {
        let o = out(out_field)?;
        let text = str_arg(json, "json")?;
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(&e.to_string()))?;
        let v = lib(FourierVectorField::from_json(&value))?;
        *o = Box::into_raw(Box::new(SgField(v)));
        Ok(())
    })
}

/// # Safety
/// `field` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sg_field_free(field: *mut SgField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Evaluates `V(t, x)`; writes `dim` values into `value`.
///
/// # Safety
/// `x` and `value` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_field_eval(field: *const SgField, t: f64, x: *const f64, value: *mut f64) -> SgStatus {
    guard(|| {
        let f = &obj(field, "field")?.0;
        let d = f.dim();
        let x = floats(x, d, "x")?;
        if value.is_null() {
            return Err(bad("value is null"));
        }
        let p = [x[0], if d == 2 { x[1] } else { 0.0 }];
        let v = f.eval(t, p);
        slice::from_raw_parts_mut(value, d).copy_from_slice(&v[..d]);
        Ok(())
    })
}

/// Runs the Morse-Smale check with default parameters.
///
/// # Safety
/// `field` must be a live handle; `verdict` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_ms_check(field: *const SgField, seed: u64, verdict: *mut SgVerdict) -> SgStatus {
    guard(|| {
        let o = out(verdict)?;
        let f = &obj(field, "field")?.0;
        let r = lib(certify_morse_smale(f, &MsParams { seed, ..MsParams::default() }))?;
        *o = match r.verdict {
            Verdict::CertifiedMs => SgVerdict::CertifiedMs,
            Verdict::Refuted => SgVerdict::Refuted,
            Verdict::Inconclusive => SgVerdict::Inconclusive,
        };
        Ok(())
    })
}

/// Gaussian wave packet `χ₀(x) e^{iξ₀·x/h}` on the band `(n0, n1)`; pass
/// `n1 = 0` in one dimension.
///
/// # Safety
/// `center`, `width` and `xi0` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_state_wave_packet(
    dim: usize,
    n0: usize,
    n1: usize,
    center: *const f64,
    width: *const f64,
    xi0: *const f64,
    h: f64,
    out_state: *mut *mut SgState,
) -> SgStatus {
    guard(|| {
        let o = out(out_state)?;
        if dim != 1 && dim != 2 {
            return Err(bad("dim must be 1 or 2"));
        }
        let bump = Bump::Gaussian {
            center: floats(center, dim, "center")?.to_vec(),
            width: floats(width, dim, "width")?.to_vec(),
        };
        let u = lib(wave_packet(&bump, floats(xi0, dim, "xi0")?, h, dim, [n0, n1]))?;
        *o = Box::into_raw(Box::new(SgState(u)));
        Ok(())
    })
}

/// # Safety
/// `state` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sg_state_free(state: *mut SgState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// `‖u‖_σ`.
///
/// # Safety
/// `state` must be a live handle; `norm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_state_sobolev_norm(state: *const SgState, sigma: f64, norm: *mut f64) -> SgStatus {
    guard(|| {
        let o = out(norm)?;
        *o = sobolev_norm(&obj(state, "state")?.0, sigma);
        Ok(())
    })
}

/// Solves the transport equation of `field` (perturbed by `perturbation`
/// with weight `epsilon` when that handle is non-null) from `initial` up to
/// `t_end`, sampling the norms of order `sigmas` every `sample_interval`.
///
/// # Safety
/// Handles must be live or null where allowed; `sigmas` must hold
/// `n_sigmas` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_solve(
    field: *const SgField,
    perturbation: *const SgField,
    epsilon: f64,
    initial: *const SgState,
    t_end: f64,
    sample_interval: f64,
    sigmas: *const f64,
    n_sigmas: usize,
    out_solution: *mut *mut SgSolution,
) -> SgStatus {
    guard(|| {
        let o = out(out_solution)?;
        let v = obj(field, "field")?.0.clone();
        let u0 = &obj(initial, "initial")?.0;
        let eq = match perturbation.as_ref() {
            Some(p) => Equation::perturbed(v, p.0.clone()),
            None => Equation::transport(v),
        };
        let mut cfg = SimulationConfig::new(u0.dim(), u0.band(), t_end);
        cfg.epsilon = epsilon;
        cfg.sample_interval = sample_interval;
        cfg.sigmas = floats(sigmas, n_sigmas, "sigmas")?.to_vec();
        let r = lib(solve(&cfg, u0, &eq))?;
        *o = Box::into_raw(Box::new(SgSolution(r)));
        Ok(())
    })
}

/// # Safety
/// `solution` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_free(solution: *mut SgSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `solution` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_len(solution: *const SgSolution) -> usize {
    solution.as_ref().map_or(0, |s| s.0.series.samples.len())
}

/// Sample `i`: time, `L²` norm and the norm for the `j`-th requested σ.
///
/// # Safety
/// `solution` must be live; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_sample(
    solution: *const SgSolution,
    i: usize,
    j: usize,
    t: *mut f64,
    l2: *mut f64,
    norm: *mut f64,
) -> SgStatus {
    guard(|| {
        let s = &obj(solution, "solution")?.0.series;
        let x = s.samples.get(i).ok_or_else(|| bad("sample index out of range"))?;
        let h = *x.h.get(j).ok_or_else(|| bad("sigma index out of range"))?;
        *out(t)? = x.t;
        *out(l2)? = x.l2;
        *out(norm)? = h;
        Ok(())
    })
}

/// Least-squares slope of `log ‖u‖_σ` on `[t0, t1]`.
///
/// # Safety
/// `solution` must be live; `rate` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_fit_rate(
    solution: *const SgSolution,
    sigma: f64,
    t0: f64,
    t1: f64,
    rate: *mut f64,
) -> SgStatus {
    guard(|| {
        let o = out(rate)?;
        let s = &obj(solution, "solution")?.0.series;
        *o = lib(fit_growth_rate(s, sigma, (t0, t1)))?.rate;
        Ok(())
    })
}

/// Runs a scenario file. `verb` is one of the command-line verbs
/// (`"growth"`, `"ms-check"`, ...). Returns [`SgStatus::Refuted`] when a
/// certification fails.
///
/// # Safety
/// All strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sg_run_scenario(path: *const c_char, verb: *const c_char, out_dir: *const c_char) -> SgStatus {
    guard(|| {
        let path = Path::new(str_arg(path, "path")?);
        let verb = str_arg(verb, "verb")?;
        let out_dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let verb: Verb = serde_json::from_value(serde_json::Value::String(verb.to_string()))
            .map_err(|_| bad(&format!("unknown verb {verb}")))?;
        let sc = lib(Scenario::load(path))?;
        let opts = RunOptions { out: out_dir, seed: None, base: path.parent().map(PathBuf::from).unwrap_or_default() };
        let r = lib(cli::run(verb, &sc, &opts))?;
        match r.refuted {
            Some(msg) => {
                set_error(msg);
                Err(SgStatus::Refuted)
            }
            None => Ok(()),
        }
    })
}
