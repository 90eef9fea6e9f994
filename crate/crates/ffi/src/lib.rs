//! C ABI over `wac-core`.
//!
//! Every function returns a [`WacStatus`]; results come back through out-pointers.
//! On failure, `wac_last_error` describes the most recent error on the calling thread.
//! Handles are opaque and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use wac_core::analysis::theoretical_bound;
use wac_core::config::ExperimentConfig;
use wac_core::error::WacError;
use wac_core::experiments::prepare;
use wac_core::io;
use wac_core::metrics::{dsc_metric, hd95, DscConvention, EmptyConvention, MaskPair};
use wac_core::optimizer::{eg_update, recommended_lr, BaselineMode, RunRecord};
use wac_core::synth::{generate, Dataset};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WacStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Numeric = 5,
    Panic = 6,
}

/// A generated or loaded dataset.
pub struct WacDataset {
    inner: Dataset,
}

/// The record of one finished training run.
pub struct WacRun {
    record: RunRecord,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Status(WacStatus, String),
    Core(WacError),
}

impl From<WacError> for Failure {
    fn from(e: WacError) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &WacError) -> WacStatus {
    match e {
        WacError::Config(_) => WacStatus::Config,
        WacError::Io(_) | WacError::Json(_) => WacStatus::Io,
        WacError::NonFinite(_) | WacError::Diverged { .. } => WacStatus::Numeric,
        _ => WacStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            WacStatus::Ok
        }
        Ok(Err(Failure::Status(s, m))) => {
            set_error(&m);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            WacStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(WacStatus::NullPointer, format!("{what} is null"))
}

fn bad(msg: impl Into<String>) -> Failure {
    Failure::Status(WacStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| bad(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn wac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generate the dataset described by the `[mixture]` section of a TOML config.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wac_dataset_generate(
    config_toml: *const c_char,
    out: *mut *mut WacDataset,
) -> WacStatus {
    guard(|| {
        let text = str_arg(config_toml, "config_toml")?;
        let out = out_arg(out, "out")?;
        let cfg = ExperimentConfig::from_toml_str(text)?;
        let ds = generate(&cfg.mixture)?;
        *out = Box::into_raw(Box::new(WacDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wac_dataset_load(path: *const c_char, out: *mut *mut WacDataset) -> WacStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let ds = io::load_dataset(Path::new(path))?;
        *out = Box::into_raw(Box::new(WacDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn wac_dataset_save(dataset: *const WacDataset, path: *const c_char) -> WacStatus {
    guard(|| {
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let path = str_arg(path, "path")?;
        io::save_dataset(Path::new(path), &ds.inner)?;
        Ok(())
    })
}

/// Number of samples; `dense` (optional) receives the number tagged dense.
///
/// # Safety
/// `dataset` must come from this library; `len` must be valid, `dense` valid or null.
#[no_mangle]
pub unsafe extern "C" fn wac_dataset_len(
    dataset: *const WacDataset,
    len: *mut usize,
    dense: *mut usize,
) -> WacStatus {
    guard(|| {
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        *out_arg(len, "len")? = ds.inner.len();
        if let Some(d) = dense.as_mut() {
            *d = ds
                .inner
                .samples
                .iter()
                .filter(|s| s.tag == wac_core::synth::Tag::Dense)
                .count();
        }
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wac_dataset_free(dataset: *mut WacDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Train one method on the config's dataset. `mode` may be null to use `train.mode`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wac_train(
    config_toml: *const c_char,
    mode: *const c_char,
    out: *mut *mut WacRun,
) -> WacStatus {
    guard(|| {
        let text = str_arg(config_toml, "config_toml")?;
        let out = out_arg(out, "out")?;
        let cfg = ExperimentConfig::from_toml_str(text)?;
        let mode = if mode.is_null() {
            cfg.train.mode
        } else {
            BaselineMode::from_name(str_arg(mode, "mode")?)?
        };
        let prep = prepare(&cfg)?;
        let record = prep.run(mode)?;
        *out = Box::into_raw(Box::new(WacRun { record }));
        Ok(())
    })
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, cap: usize, len: *mut usize) -> Result<(), Failure> {
    *out_arg(len, "len")? = src.len();
    if buf.is_null() {
        return Ok(());
    }
    if cap < src.len() {
        return Err(bad(format!("buffer holds {cap} values, {} needed", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Copy the averaged weights into `buf`. With a null `buf`, only the length is reported.
///
/// # Safety
/// `run` must come from this library; `buf` must hold `cap` doubles (or be null).
#[no_mangle]
pub unsafe extern "C" fn wac_run_beta_bar(
    run: *const WacRun,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> WacStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        copy_out(&r.record.beta_bar, buf, cap, len)
    })
}

/// Copy the averaged parameters into `buf`. With a null `buf`, only the length is reported.
///
/// # Safety
/// As for [`wac_run_beta_bar`].
#[no_mangle]
pub unsafe extern "C" fn wac_run_theta_bar(
    run: *const WacRun,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> WacStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        copy_out(&r.record.theta_bar, buf, cap, len)
    })
}

/// # Safety
/// `run` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wac_run_free(run: *mut WacRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// One exponentiated-gradient step on a sample weight.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wac_eg_update(beta: f64, ce: f64, ac: f64, eta: f64, out: *mut f64) -> WacStatus {
    guard(|| {
        *out_arg(out, "out")? = eg_update(beta, ce, ac, eta)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wac_recommended_lr(
    gamma: f64,
    c_theta: f64,
    c_b: f64,
    n: usize,
    t: u64,
    out: *mut f64,
) -> WacStatus {
    guard(|| {
        *out_arg(out, "out")? = recommended_lr(gamma, c_theta, c_b, n, t)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wac_theoretical_bound(
    gamma: f64,
    c_theta: f64,
    c_b: f64,
    n: usize,
    t: u64,
    out: *mut f64,
) -> WacStatus {
    guard(|| {
        *out_arg(out, "out")? = theoretical_bound(gamma, c_theta, c_b, n, t)?;
        Ok(())
    })
}

unsafe fn masks(pred: *const u8, gt: *const u8, height: usize, width: usize) -> Result<MaskPair, Failure> {
    if pred.is_null() {
        return Err(null("pred"));
    }
    if gt.is_null() {
        return Err(null("gt"));
    }
    let n = height
        .checked_mul(width)
        .ok_or_else(|| bad("mask size overflows"))?;
    let p = std::slice::from_raw_parts(pred, n).iter().map(|&v| v != 0).collect();
    let g = std::slice::from_raw_parts(gt, n).iter().map(|&v| v != 0).collect();
    Ok(MaskPair::new(p, g, height, width)?)
}

/// Dice score of two row-major binary masks (nonzero = foreground).
/// `legacy` selects the convention that scores an empty ground truth as 1.
///
/// # Safety
/// `pred` and `gt` must each hold `height * width` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wac_dsc(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    legacy: bool,
    out: *mut f64,
) -> WacStatus {
    guard(|| {
        let pair = masks(pred, gt, height, width)?;
        let conv = if legacy {
            DscConvention::TransUnetLegacy
        } else {
            DscConvention::Corrected
        };
        *out_arg(out, "out")? = dsc_metric(&pair, conv)?;
        Ok(())
    })
}

/// 95th-percentile Hausdorff distance. When exactly one mask is empty, `defined`
/// receives false and `out` is set to 0.
///
/// # Safety
/// As for [`wac_dsc`]; `defined` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wac_hd95(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
    defined: *mut bool,
) -> WacStatus {
    guard(|| {
        let pair = masks(pred, gt, height, width)?;
        let out = out_arg(out, "out")?;
        let defined = out_arg(defined, "defined")?;
        match hd95(&pair, EmptyConvention::Sentinel)? {
            Some(v) => {
                *out = v;
                *defined = true;
            }
            None => {
                *out = 0.0;
                *defined = false;
            }
        }
        Ok(())
    })
}
