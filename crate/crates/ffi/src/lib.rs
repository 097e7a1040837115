//! C interface to `relbm`.
//!
//! Every fallible call returns an `int32_t` status: `RELBM_OK` (0), one of
//! the library error codes (1 to 12), `RELBM_ERR_NULL` for a null argument or
//! invalid UTF-8, or `RELBM_ERR_PANIC` if Rust code panicked. The message of
//! the most recent failure on the calling thread is available from
//! `relbm_last_error`.
//!
//! Handles are opaque, created by the library and released with the matching
//! `*_free` function. Strings returned by accessors are owned by the handle
//! and stay valid until it is freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DMatrix;
use relbm::cli_io::{execute, SimConfig};
use relbm::frame_flow::{FrameElement, GroupTag};
use relbm::iwasawa::{decompose, IwasawaCoords};
use relbm::rng::NoiseKey;
use relbm::rw_sim::{RwSample, RwSimulator};
use relbm::spacetime::{classify_regime, Fiber, Regime, SpaceTimeSpec, WarpFunction};
use relbm::Error;

pub const RELBM_OK: i32 = 0;
pub const RELBM_ERR_NULL: i32 = -1;
pub const RELBM_ERR_PANIC: i32 = -2;

/// Regime codes returned by `relbm_classify`.
pub const RELBM_REGIME_FINITE_HORIZON_POINT: i32 = 0;
pub const RELBM_REGIME_FINITE_HORIZON_TANGENT: i32 = 1;
pub const RELBM_REGIME_INF_FLAT_LINE: i32 = 2;
pub const RELBM_REGIME_INF_SPHERE_CIRCLE: i32 = 3;
pub const RELBM_REGIME_INF_HYP_CONE: i32 = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RELBM_OK,
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            e.code()
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null or invalid argument: {what}"));
            RELBM_ERR_NULL
        }
        Err(_) => {
            set_error("internal panic");
            RELBM_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

fn cstring(s: String) -> CString {
    CString::new(s.replace('\0', " ")).unwrap_or_default()
}

/// Message of the last failed call on this thread; empty if none.
#[no_mangle]
pub extern "C" fn relbm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn relbm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Asymptotic regime of a Robertson-Walker space-time.
///
/// # Safety
/// `warp` and `fiber` are NUL-terminated strings; `regime` is writable.
#[no_mangle]
pub unsafe extern "C" fn relbm_classify(
    warp: *const c_char,
    fiber: *const c_char,
    d: usize,
    sigma: f64,
    regime: *mut i32,
) -> i32 {
    guard(|| {
        let warp: WarpFunction = str_arg(warp, "warp")?.parse()?;
        let fiber: Fiber = str_arg(fiber, "fiber")?.parse()?;
        let out = out_arg(regime, "regime")?;
        let spec = SpaceTimeSpec::rw(fiber, warp, d, sigma);
        spec.validate()?;
        *out = match classify_regime(&spec)?.predicted_regime {
            Regime::FiniteHorizonPoint => RELBM_REGIME_FINITE_HORIZON_POINT,
            Regime::FiniteHorizonTangent => RELBM_REGIME_FINITE_HORIZON_TANGENT,
            Regime::InfFlatLine => RELBM_REGIME_INF_FLAT_LINE,
            Regime::InfSphereCircle => RELBM_REGIME_INF_SPHERE_CIRCLE,
            Regime::InfHypCone => RELBM_REGIME_INF_HYP_CONE,
        };
        Ok(())
    })
}

/// Completed ensemble run.
pub struct RelbmRun {
    exit_code: i32,
    summary_json: CString,
    summary_csv: CString,
}

/// Validates and runs the ensemble described by a TOML config. Nothing is
/// written to disk.
///
/// # Safety
/// `config_toml` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn relbm_run(config_toml: *const c_char, threads: usize, out: *mut *mut RelbmRun) -> i32 {
    guard(|| {
        let text = str_arg(config_toml, "config_toml")?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfg = SimConfig::from_toml_str(text)?;
        let r = execute(&cfg, threads.max(1))?;
        let json = serde_json::to_string(&r.summary).map_err(|e| Error::Internal(e.to_string()))?;
        let run = RelbmRun {
            exit_code: r.summary.exit_code(),
            summary_json: cstring(json),
            summary_csv: cstring(r.summary.to_csv()?),
        };
        *out = Box::into_raw(Box::new(run));
        Ok(())
    })
}

/// 0 all checks pass, 1 some check failed, 2 some check inconclusive; -1 for
/// a null handle.
///
/// # Safety
/// `run` is null or a handle from `relbm_run`.
#[no_mangle]
pub unsafe extern "C" fn relbm_run_exit_code(run: *const RelbmRun) -> i32 {
    run.as_ref().map_or(RELBM_ERR_NULL, |r| r.exit_code)
}

/// Summary JSON; null for a null handle.
///
/// # Safety
/// `run` is null or a handle from `relbm_run`.
#[no_mangle]
pub unsafe extern "C" fn relbm_run_summary_json(run: *const RelbmRun) -> *const c_char {
    run.as_ref().map_or(ptr::null(), |r| r.summary_json.as_ptr())
}

/// Summary CSV (`check,statistic,threshold,verdict`); null for a null handle.
///
/// # Safety
/// `run` is null or a handle from `relbm_run`.
#[no_mangle]
pub unsafe extern "C" fn relbm_run_summary_csv(run: *const RelbmRun) -> *const c_char {
    run.as_ref().map_or(ptr::null(), |r| r.summary_csv.as_ptr())
}

/// # Safety
/// `run` is null or a handle from `relbm_run` not freed before.
#[no_mangle]
pub unsafe extern "C" fn relbm_run_free(run: *mut RelbmRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// One simulated reduced-dynamics path.
pub struct RelbmRwPath {
    samples: Vec<RwSample>,
}

/// Simulates path `path` of seed `seed` for the Robertson-Walker config in
/// `config_toml`; only `[spacetime]` and `[numerics]` are used.
///
/// # Safety
/// `config_toml` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn relbm_rw_simulate(
    config_toml: *const c_char,
    seed: u64,
    path: u64,
    out: *mut *mut RelbmRwPath,
) -> i32 {
    guard(|| {
        let text = str_arg(config_toml, "config_toml")?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfg = SimConfig::from_toml_str(text)?;
        cfg.validate()?;
        let sim = RwSimulator::new(&cfg.spec()?, cfg.numerics.clone())?;
        let rec = sim.simulate(NoiseKey::new(seed, path)).map_err(|a| a.error)?;
        *out = Box::into_raw(Box::new(RelbmRwPath { samples: rec.samples }));
        Ok(())
    })
}

/// Number of recorded samples; 0 for a null handle.
///
/// # Safety
/// `p` is null or a handle from `relbm_rw_simulate`.
#[no_mangle]
pub unsafe extern "C" fn relbm_rw_path_len(p: *const RelbmRwPath) -> usize {
    p.as_ref().map_or(0, |p| p.samples.len())
}

/// Sample `i` as `(s, t, tdot, C, D, A)` written to `out[0..6]`.
///
/// # Safety
/// `p` is a handle from `relbm_rw_simulate`; `out` has room for 6 doubles.
#[no_mangle]
pub unsafe extern "C" fn relbm_rw_path_sample(p: *const RelbmRwPath, i: usize, out: *mut f64) -> i32 {
    guard(|| {
        let p = p.as_ref().ok_or(Failure::Null("path"))?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let x = p.samples.get(i).ok_or(Error::Dimension { expected: p.samples.len(), got: i })?;
        let vals = [x.s, x.t, x.tdot, x.c, x.d, x.a];
        ptr::copy_nonoverlapping(vals.as_ptr(), out, vals.len());
        Ok(())
    })
}

/// # Safety
/// `p` is null or a handle from `relbm_rw_simulate` not freed before.
#[no_mangle]
pub unsafe extern "C" fn relbm_rw_path_free(p: *mut RelbmRwPath) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// NAK factors of one matrix.
pub struct RelbmIwasawa {
    coords: IwasawaCoords,
    residual: f64,
}

/// Factorises the `dim x dim` row-major matrix `g` of group `group`
/// (`so1d+1`, `so2d` or `so1d`).
///
/// # Safety
/// `group` is a NUL-terminated string, `g` points to `dim * dim` doubles and
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn relbm_decompose(
    group: *const c_char,
    dim: usize,
    g: *const f64,
    out: *mut *mut RelbmIwasawa,
) -> i32 {
    guard(|| {
        let group: GroupTag = str_arg(group, "group")?.parse()?;
        if g.is_null() {
            return Err(Failure::Null("g"));
        }
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let d = match group {
            GroupTag::So1dPlus1 | GroupTag::So2d => dim.checked_sub(2),
            GroupTag::So1d | GroupTag::SoDPlus1 => dim.checked_sub(1),
        }
        .ok_or(Error::Dimension { expected: 3, got: dim })?;
        let vals = std::slice::from_raw_parts(g, dim * dim);
        let fe = FrameElement::new(group, d, DMatrix::from_row_slice(dim, dim, vals))?;
        let coords = decompose(&fe)?;
        let residual = coords.residual(&fe.g);
        *out = Box::into_raw(Box::new(RelbmIwasawa { coords, residual }));
        Ok(())
    })
}

/// Matrix dimension of the factors; 0 for a null handle.
///
/// # Safety
/// `h` is null or a handle from `relbm_decompose`.
#[no_mangle]
pub unsafe extern "C" fn relbm_iwasawa_dim(h: *const RelbmIwasawa) -> usize {
    h.as_ref().map_or(0, |h| h.coords.n.nrows())
}

/// Number of `A` parameters (1 or 2); 0 for a null handle.
///
/// # Safety
/// `h` is null or a handle from `relbm_decompose`.
#[no_mangle]
pub unsafe extern "C" fn relbm_iwasawa_rank(h: *const RelbmIwasawa) -> usize {
    h.as_ref().map_or(0, |h| h.coords.a_params.len())
}

/// `max |n a k - g|`; NaN for a null handle.
///
/// # Safety
/// `h` is null or a handle from `relbm_decompose`.
#[no_mangle]
pub unsafe extern "C" fn relbm_iwasawa_residual(h: *const RelbmIwasawa) -> f64 {
    h.as_ref().map_or(f64::NAN, |h| h.residual)
}

/// Copies the `A` parameters (`rank` doubles) to `out`.
///
/// # Safety
/// `h` is a handle from `relbm_decompose`; `out` has room for `rank` doubles.
#[no_mangle]
pub unsafe extern "C" fn relbm_iwasawa_a_params(h: *const RelbmIwasawa, out: *mut f64) -> i32 {
    guard(|| {
        let h = h.as_ref().ok_or(Failure::Null("handle"))?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        ptr::copy_nonoverlapping(h.coords.a_params.as_ptr(), out, h.coords.a_params.len());
        Ok(())
    })
}

/// Factor selector for `relbm_iwasawa_factor`.
pub const RELBM_FACTOR_N: i32 = 0;
pub const RELBM_FACTOR_A: i32 = 1;
pub const RELBM_FACTOR_K: i32 = 2;

/// Copies factor `which` row-major to `out` (`dim * dim` doubles).
///
/// # Safety
/// `h` is a handle from `relbm_decompose`; `out` has room for `dim * dim`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn relbm_iwasawa_factor(h: *const RelbmIwasawa, which: i32, out: *mut f64) -> i32 {
    guard(|| {
        let h = h.as_ref().ok_or(Failure::Null("handle"))?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let m = match which {
            RELBM_FACTOR_N => &h.coords.n,
            RELBM_FACTOR_A => &h.coords.a,
            RELBM_FACTOR_K => &h.coords.k,
            _ => return Err(Error::InvalidConfig(format!("factor selector {which}")).into()),
        };
        let row_major = m.transpose();
        ptr::copy_nonoverlapping(row_major.as_slice().as_ptr(), out, m.len());
        Ok(())
    })
}

/// # Safety
/// `h` is null or a handle from `relbm_decompose` not freed before.
#[no_mangle]
pub unsafe extern "C" fn relbm_iwasawa_free(h: *mut RelbmIwasawa) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
