//! C ABI over the hyperlab library.
//!
//! Every function returns a [`HyperlabStatus`]. On failure the message is kept per thread
//! and can be read with [`hyperlab_last_error`]. Configurations and results are opaque
//! handles released with their `_free` functions.

use hyperlab::config::RunConfig;
use hyperlab::error::LabError;
use hyperlab::experiments::Runner;
use hyperlab::mde::solve_mde;
use hyperlab::report::ExperimentResult;
use hyperlab::run::{error_path, execute};
use hyperlab::spectra::{gram_singular_values, sample, EnsembleSpec};
use hyperlab::stability::{beta_pm, SymmetryClass};
use hyperlab::C64;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HyperlabStatus {
    Ok = 0,
    NullPointer = 1,
    /// Rejected input or configuration.
    Validation = 2,
    Numerical = 3,
    BufferTooSmall = 4,
    Panic = 5,
}

/// Solution of the Dyson equation at one `(z, w)`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct HyperlabMdePoint {
    pub m_re: f64,
    pub m_im: f64,
    pub u_re: f64,
    pub u_im: f64,
    pub dm_dw_re: f64,
    pub dm_dw_im: f64,
    pub residual: f64,
}

pub struct HyperlabConfig {
    inner: RunConfig,
}

pub struct HyperlabResult {
    csv: String,
    json: String,
    summary: String,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(err: LabError) -> HyperlabStatus {
    let status = if err.is_validation() || matches!(err, LabError::Io { .. }) {
        HyperlabStatus::Validation
    } else {
        HyperlabStatus::Numerical
    };
    set_error(err.to_string());
    status
}

fn guard(f: impl FnOnce() -> HyperlabStatus) -> HyperlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            HyperlabStatus::Panic
        }
    }
}

/// Copies `text` plus a terminating NUL into `buf`; `needed` receives the full size.
unsafe fn copy_out(text: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> HyperlabStatus {
    let size = text.len() + 1;
    if !needed.is_null() {
        *needed = size;
    }
    if buf.is_null() || len < size {
        set_error(format!("buffer of {len} bytes is too small, {size} needed"));
        return HyperlabStatus::BufferTooSmall;
    }
    std::ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
    *buf.add(text.len()) = 0;
    HyperlabStatus::Ok
}

/// Message of the last failure on this thread.
///
/// # Safety
/// `buf` must point to `len` writable bytes or be null; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn hyperlab_last_error(buf: *mut c_char, len: usize, needed: *mut usize) -> HyperlabStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    copy_out(&msg, buf, len, needed)
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hyperlab_mde_solve(
    z_re: f64,
    z_im: f64,
    w_re: f64,
    w_im: f64,
    out: *mut HyperlabMdePoint,
) -> HyperlabStatus {
    if out.is_null() {
        set_error("out is null");
        return HyperlabStatus::NullPointer;
    }
    guard(|| match solve_mde(C64::new(z_re, z_im), C64::new(w_re, w_im)) {
        Ok(p) => {
            *out = HyperlabMdePoint {
                m_re: p.m.re,
                m_im: p.m.im,
                u_re: p.u.re,
                u_im: p.u.im,
                dm_dw_re: p.dm_dw.re,
                dm_dw_im: p.dm_dw.im,
                residual: p.residual(),
            };
            HyperlabStatus::Ok
        }
        Err(e) => fail(e),
    })
}

/// Eigenvalues `beta_plus, beta_minus` written as `[re+, im+, re-, im-]`.
///
/// # Safety
/// `z` and `w` point to 4 doubles `[re1, im1, re2, im2]`; `out` to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn hyperlab_beta_pm(z: *const f64, w: *const f64, out: *mut f64) -> HyperlabStatus {
    if z.is_null() || w.is_null() || out.is_null() {
        set_error("null argument");
        return HyperlabStatus::NullPointer;
    }
    guard(|| {
        let z = std::slice::from_raw_parts(z, 4);
        let w = std::slice::from_raw_parts(w, 4);
        match beta_pm(C64::new(z[0], z[1]), C64::new(z[2], z[3]), C64::new(w[0], w[1]), C64::new(w[2], w[3])) {
            Ok((p, m)) => {
                let o = std::slice::from_raw_parts_mut(out, 4);
                o.copy_from_slice(&[p.re, p.im, m.re, m.im]);
                HyperlabStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Ascending singular values of `X - z` for sample `index` of the Gaussian ensemble.
///
/// # Safety
/// `out` must point to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn hyperlab_singular_values(
    n: usize,
    real_class: bool,
    seed: u64,
    index: u64,
    z_re: f64,
    z_im: f64,
    out: *mut f64,
) -> HyperlabStatus {
    if out.is_null() {
        set_error("out is null");
        return HyperlabStatus::NullPointer;
    }
    guard(|| {
        let class = if real_class { SymmetryClass::Real } else { SymmetryClass::Complex };
        let spec = EnsembleSpec::ginibre(n, class, seed);
        let run = || -> hyperlab::Result<Vec<f64>> {
            spec.validate()?;
            gram_singular_values(&sample(&spec, index)?, C64::new(z_re, z_im))
        };
        match run() {
            Ok(v) => {
                std::slice::from_raw_parts_mut(out, n).copy_from_slice(&v);
                HyperlabStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Parses and validates a TOML run configuration.
///
/// # Safety
/// `text` is a NUL-terminated UTF-8 string; `out` receives a handle owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn hyperlab_config_parse(text: *const c_char, out: *mut *mut HyperlabConfig) -> HyperlabStatus {
    if text.is_null() || out.is_null() {
        set_error("null argument");
        return HyperlabStatus::NullPointer;
    }
    guard(|| {
        let Ok(s) = CStr::from_ptr(text).to_str() else {
            set_error("configuration is not UTF-8");
            return HyperlabStatus::Validation;
        };
        match RunConfig::parse(s).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(HyperlabConfig { inner: c }));
                HyperlabStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `config` is null or a handle from [`hyperlab_config_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hyperlab_config_free(config: *mut HyperlabConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Hex digest of the numerically relevant part of the configuration.
///
/// # Safety
/// See [`hyperlab_last_error`] for the buffer contract.
#[no_mangle]
pub unsafe extern "C" fn hyperlab_config_hash(
    config: *const HyperlabConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> HyperlabStatus {
    let Some(c) = config.as_ref() else {
        set_error("config is null");
        return HyperlabStatus::NullPointer;
    };
    guard(|| match c.inner.hash() {
        Ok(h) => copy_out(&h, buf, len, needed),
        Err(e) => fail(e),
    })
}

/// Runs the configured experiment with `workers` threads (0 keeps the configured count).
///
/// # Safety
/// `config` is a live handle; `out` receives a result handle owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn hyperlab_run(
    config: *const HyperlabConfig,
    workers: usize,
    out: *mut *mut HyperlabResult,
) -> HyperlabStatus {
    let Some(c) = config.as_ref() else {
        set_error("config is null");
        return HyperlabStatus::NullPointer;
    };
    if out.is_null() {
        set_error("out is null");
        return HyperlabStatus::NullPointer;
    }
    guard(|| {
        let workers = if workers == 0 { c.inner.workers } else { workers };
        let run = || -> hyperlab::Result<ExperimentResult> {
            let runner = Runner::new(workers, None)?;
            execute(&c.inner, &runner, None)
        };
        match run().and_then(|r| Ok(HyperlabResult { csv: r.to_csv()?, json: r.to_json(), summary: r.summary() })) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(r));
                HyperlabStatus::Ok
            }
            Err(e) => {
                let path = error_path(&e, c.inner.command);
                let status = fail(e);
                LAST_ERROR.with(|m| {
                    let msg = m.borrow().clone();
                    *m.borrow_mut() = format!("[{path}] {msg}");
                });
                status
            }
        }
    })
}

/// # Safety
/// `result` is null or a handle from [`hyperlab_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hyperlab_result_free(result: *mut HyperlabResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HyperlabArtifact {
    Csv = 0,
    Json = 1,
    Summary = 2,
}

/// Copies one artifact of a result into `buf`.
///
/// # Safety
/// `result` is a live handle; see [`hyperlab_last_error`] for the buffer contract.
#[no_mangle]
pub unsafe extern "C" fn hyperlab_result_text(
    result: *const HyperlabResult,
    which: HyperlabArtifact,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> HyperlabStatus {
    let Some(r) = result.as_ref() else {
        set_error("result is null");
        return HyperlabStatus::NullPointer;
    };
    let text = match which {
        HyperlabArtifact::Csv => &r.csv,
        HyperlabArtifact::Json => &r.json,
        HyperlabArtifact::Summary => &r.summary,
    };
    copy_out(text, buf, len, needed)
}
