//! C API for the referential game simulator.
//!
//! Objects cross the boundary as opaque handles (`RgConfig`, `RgRun`) that
//! the caller releases with the matching `*_free` function. Every fallible
//! function returns an `RgStatus`; on failure a human-readable message is
//! kept per thread and can be copied out with `rg_last_error`. Panics never
//! unwind into C: they are caught and reported as `RG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use refgame::diffrank::{soft_ranks_values, SoftRankConfig};
use refgame::game::LossKind;
use refgame::harness::{run_experiment, ExperimentConfig, HarnessError, RunOutput};
use refgame::metrics::rsa;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Runtime = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RgLoss {
    Ce = 0,
    CeRsa = 1,
}

/// Final metrics of one trained seed.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RgSeedSummary {
    pub seed: u64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub topsim: f64,
    pub rsa_sl: f64,
    pub rsa_si: f64,
    pub rsa_li: f64,
    /// NaN when the dataset has no noise pairs.
    pub noise_accuracy: f64,
    /// NaN when the dataset has no Winoground-style pairs.
    pub winoground_accuracy: f64,
}

/// Opaque experiment configuration.
pub struct RgConfig(ExperimentConfig);

/// Opaque result of a completed training run.
pub struct RgRun(RunOutput);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: RgStatus, msg: impl Into<String>) -> RgStatus {
    set_error(msg);
    status
}

fn harness_status(e: &HarnessError) -> RgStatus {
    match e {
        HarnessError::Config(_) => RgStatus::Config,
        HarnessError::Io { .. } => RgStatus::Io,
        _ => RgStatus::Runtime,
    }
}

/// Runs `f`, converting panics into `RG_STATUS_PANIC`.
fn guard(f: impl FnOnce() -> RgStatus) -> RgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == RgStatus::Ok {
                set_error("");
            }
            s
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(RgStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, RgStatus> {
    if p.is_null() {
        return Err(fail(RgStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RgStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Copies `s` plus a terminating NUL into `buf`. `needed` (optional)
/// receives the required capacity in bytes, NUL included. A short buffer
/// leaves the last error message untouched so it can itself be fetched
/// with a size probe.
unsafe fn copy_out(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> RgStatus {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || cap < n {
        return RgStatus::BufferTooSmall;
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    RgStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf`.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes; `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn rg_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> RgStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    copy_out(&msg, buf, cap, needed)
}

/// Creates a configuration holding the defaults.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rg_config_new(out: *mut *mut RgConfig) -> RgStatus {
    guard(|| {
        if out.is_null() {
            return fail(RgStatus::NullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(RgConfig(ExperimentConfig::default())));
        RgStatus::Ok
    })
}

/// Parses a TOML configuration layered over the defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rg_config_from_toml(toml: *const c_char, out: *mut *mut RgConfig) -> RgStatus {
    guard(|| {
        if out.is_null() {
            return fail(RgStatus::NullPointer, "out is null");
        }
        let text = match str_arg(toml, "toml") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::from_toml(text) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(RgConfig(cfg)));
                RgStatus::Ok
            }
            Err(e) => fail(harness_status(&e), e.to_string()),
        }
    })
}

/// Releases a configuration. Null is ignored.
///
/// # Safety
/// `cfg` must come from `rg_config_new`/`rg_config_from_toml` and not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rg_config_free(cfg: *mut RgConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

unsafe fn with_config(cfg: *mut RgConfig, f: impl FnOnce(&mut ExperimentConfig) -> RgStatus) -> RgStatus {
    guard(|| match cfg.as_mut() {
        None => fail(RgStatus::NullPointer, "config is null"),
        Some(c) => {
            let before = c.0.clone();
            let s = f(&mut c.0);
            if s != RgStatus::Ok {
                return s;
            }
            if let Err(e) = c.0.validate() {
                c.0 = before;
                return fail(harness_status(&e), e.to_string());
            }
            RgStatus::Ok
        }
    })
}

/// Sets the training loss.
///
/// # Safety
/// `cfg` must be a live configuration handle.
#[no_mangle]
pub unsafe extern "C" fn rg_config_set_loss(cfg: *mut RgConfig, loss: RgLoss) -> RgStatus {
    with_config(cfg, |c| {
        c.loss = match loss {
            RgLoss::Ce => LossKind::Ce,
            RgLoss::CeRsa => LossKind::CeRsa,
        };
        RgStatus::Ok
    })
}

/// Sets the number of training epochs. Invalid values leave the
/// configuration unchanged.
///
/// # Safety
/// `cfg` must be a live configuration handle.
#[no_mangle]
pub unsafe extern "C" fn rg_config_set_epochs(cfg: *mut RgConfig, epochs: usize) -> RgStatus {
    with_config(cfg, |c| {
        c.epochs = epochs;
        RgStatus::Ok
    })
}

/// Sets the message channel: vocabulary size and maximum length.
///
/// # Safety
/// `cfg` must be a live configuration handle.
#[no_mangle]
pub unsafe extern "C" fn rg_config_set_channel(cfg: *mut RgConfig, vocab: usize, max_len: usize) -> RgStatus {
    with_config(cfg, |c| {
        c.vocab = vocab;
        c.max_len = max_len;
        RgStatus::Ok
    })
}

/// Replaces the seed list with `n` seeds read from `seeds`.
///
/// # Safety
/// `seeds` must be valid for `n` reads.
#[no_mangle]
pub unsafe extern "C" fn rg_config_set_seeds(cfg: *mut RgConfig, seeds: *const u64, n: usize) -> RgStatus {
    with_config(cfg, |c| {
        if seeds.is_null() {
            return fail(RgStatus::NullPointer, "seeds is null");
        }
        c.seeds = std::slice::from_raw_parts(seeds, n).to_vec();
        RgStatus::Ok
    })
}

/// Sets the output root directory.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rg_config_set_out_dir(cfg: *mut RgConfig, path: *const c_char) -> RgStatus {
    with_config(cfg, |c| match str_arg(path, "path") {
        Ok(p) => {
            c.out_dir = PathBuf::from(p);
            RgStatus::Ok
        }
        Err(s) => s,
    })
}

/// Serializes the configuration as TOML into `buf` (see `rg_last_error`
/// for the buffer convention).
///
/// # Safety
/// `cfg` must be live; `buf` null or valid for `cap` bytes; `needed` null
/// or writable.
#[no_mangle]
pub unsafe extern "C" fn rg_config_to_toml(
    cfg: *const RgConfig,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> RgStatus {
    guard(|| match cfg.as_ref() {
        None => fail(RgStatus::NullPointer, "config is null"),
        Some(c) => copy_out(&c.0.to_toml(), buf, cap, needed),
    })
}

/// Trains every configured seed (skipping seeds already completed in the
/// run directory) on up to `workers` threads.
///
/// # Safety
/// `cfg` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rg_run(cfg: *const RgConfig, workers: usize, out: *mut *mut RgRun) -> RgStatus {
    guard(|| {
        let Some(c) = cfg.as_ref() else {
            return fail(RgStatus::NullPointer, "config is null");
        };
        if out.is_null() {
            return fail(RgStatus::NullPointer, "out is null");
        }
        match run_experiment(&c.0, workers.max(1)) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(RgRun(r)));
                RgStatus::Ok
            }
            Err(e) => fail(harness_status(&e), e.to_string()),
        }
    })
}

/// Number of seed summaries in a run.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn rg_run_seed_count(run: *const RgRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.summaries.len())
}

/// Copies the summary of the `index`-th seed.
///
/// # Safety
/// `run` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rg_run_summary(run: *const RgRun, index: usize, out: *mut RgSeedSummary) -> RgStatus {
    guard(|| {
        let Some(r) = run.as_ref() else {
            return fail(RgStatus::NullPointer, "run is null");
        };
        if out.is_null() {
            return fail(RgStatus::NullPointer, "out is null");
        }
        let Some(s) = r.0.summaries.get(index) else {
            return fail(
                RgStatus::InvalidArgument,
                format!("index {index} out of range for {} seeds", r.0.summaries.len()),
            );
        };
        *out = RgSeedSummary {
            seed: s.seed,
            train_accuracy: s.train.accuracy,
            val_accuracy: s.validation.accuracy,
            topsim: s.validation.topsim,
            rsa_sl: s.validation.rsa_sl,
            rsa_si: s.validation.rsa_si,
            rsa_li: s.validation.rsa_li,
            noise_accuracy: s.noise.as_ref().map_or(f64::NAN, |m| m.accuracy),
            winoground_accuracy: s.winoground.as_ref().map_or(f64::NAN, |m| m.accuracy),
        };
        RgStatus::Ok
    })
}

/// Copies the run directory path.
///
/// # Safety
/// As for `rg_config_to_toml`.
#[no_mangle]
pub unsafe extern "C" fn rg_run_dir(run: *const RgRun, buf: *mut c_char, cap: usize, needed: *mut usize) -> RgStatus {
    guard(|| match run.as_ref() {
        None => fail(RgStatus::NullPointer, "run is null"),
        Some(r) => copy_out(&r.0.dir.display().to_string(), buf, cap, needed),
    })
}

/// Releases a run. Null is ignored.
///
/// # Safety
/// `run` must come from `rg_run` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rg_run_free(run: *mut RgRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Representational similarity between two row-major matrices describing
/// the same `n` items: `x` is `n × dx`, `y` is `n × dy`.
///
/// # Safety
/// `x` and `y` must be valid for `n*dx` and `n*dy` reads; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rg_rsa(
    x: *const f64,
    dx: usize,
    y: *const f64,
    dy: usize,
    n: usize,
    out: *mut f64,
) -> RgStatus {
    guard(|| {
        if x.is_null() || y.is_null() || out.is_null() {
            return fail(RgStatus::NullPointer, "x, y and out must be non-null");
        }
        if dx == 0 || dy == 0 {
            return fail(RgStatus::InvalidArgument, "row widths must be positive");
        }
        let xs = std::slice::from_raw_parts(x, n * dx);
        let ys = std::slice::from_raw_parts(y, n * dy);
        let xr: Vec<&[f64]> = xs.chunks(dx).collect();
        let yr: Vec<&[f64]> = ys.chunks(dy).collect();
        match rsa(&xr, &yr) {
            Ok(r) => {
                *out = r;
                RgStatus::Ok
            }
            Err(e) => fail(RgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Standardized soft ranks of `n` values with smoothness `epsilon`,
/// written to `out` (length `n`).
///
/// # Safety
/// `values` and `out` must be valid for `n` elements.
#[no_mangle]
pub unsafe extern "C" fn rg_soft_ranks(values: *const f64, n: usize, epsilon: f64, out: *mut f64) -> RgStatus {
    guard(|| {
        if values.is_null() || out.is_null() {
            return fail(RgStatus::NullPointer, "values and out must be non-null");
        }
        let v = std::slice::from_raw_parts(values, n);
        let cfg = SoftRankConfig {
            regularization_strength: epsilon,
            standardize: true,
        };
        match soft_ranks_values(v, &cfg) {
            Ok(r) => {
                std::slice::from_raw_parts_mut(out, n).copy_from_slice(&r);
                RgStatus::Ok
            }
            Err(e) => fail(RgStatus::InvalidArgument, e.to_string()),
        }
    })
}
