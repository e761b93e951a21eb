//! C ABI over the `robust-mmr` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style functions and released with the matching `*_free`. Every fallible
//! function returns an [`RmmrStatus`]; on failure the message is available
//! through [`rmmr_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use robust_mmr::config::RunConfig;
use robust_mmr::data::{generate_corpus, read_corpus, write_corpus, PairedSample};
use robust_mmr::eval::{domain_drop, embed_checkpoint};
use robust_mmr::trainer::{lr_at, train_run, Checkpoint};
use robust_mmr::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmmrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NonFinite = 4,
    BufferTooSmall = 5,
    UnsupportedVersion = 6,
    IntegrityError = 7,
    IoError = 8,
    Panic = 99,
}

/// Run configuration.
pub struct RmmrConfig {
    inner: RunConfig,
}

/// Loaded or generated corpus.
pub struct RmmrCorpus {
    samples: Vec<PairedSample>,
}

/// Trained model state.
pub struct RmmrCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RmmrStatus {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Validation(_) => RmmrStatus::InvalidArgument,
        Error::NonFinite { .. } => RmmrStatus::NonFinite,
        Error::UnsupportedVersion { .. } => RmmrStatus::UnsupportedVersion,
        Error::Integrity(_) => RmmrStatus::IntegrityError,
        Error::Io(_) => RmmrStatus::IoError,
        _ => RmmrStatus::DataError,
    }
}

fn fail(status: RmmrStatus, msg: impl Into<String>) -> RmmrStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), RmmrStatus>) -> RmmrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RmmrStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(RmmrStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: robust_mmr::Result<T>) -> Result<T, RmmrStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, RmmrStatus> {
    if p.is_null() {
        return Err(fail(RmmrStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(RmmrStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, RmmrStatus> {
    p.as_ref().ok_or_else(|| fail(RmmrStatus::NullPointer, format!("{name} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T, name: &str) -> Result<(), RmmrStatus> {
    if out.is_null() {
        return Err(fail(RmmrStatus::NullPointer, format!("{name} is null")));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rmmr_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rmmr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn rmmr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `out` must be a valid pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn rmmr_config_default(out: *mut *mut RmmrConfig) -> RmmrStatus {
    guard(|| put(out, RmmrConfig { inner: RunConfig::default() }, "out"))
}

/// Parses a strict JSON run configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rmmr_config_from_json(json: *const c_char, out: *mut *mut RmmrConfig) -> RmmrStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let inner = lift(RunConfig::from_json(text))?;
        put(out, RmmrConfig { inner }, "out")
    })
}

/// Serializes a configuration; free the result with [`rmmr_string_free`].
///
/// # Safety
/// `cfg` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rmmr_config_to_json(cfg: *const RmmrConfig, out: *mut *mut c_char) -> RmmrStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        if out.is_null() {
            return Err(fail(RmmrStatus::NullPointer, "out is null"));
        }
        let text = lift(cfg.inner.to_json())?;
        *out = CString::new(text).map_err(|_| fail(RmmrStatus::DataError, "interior NUL"))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rmmr_config_set_seed(cfg: *mut RmmrConfig, seed: u64) -> RmmrStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| fail(RmmrStatus::NullPointer, "cfg is null"))?;
        cfg.inner.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rmmr_config_set_total_steps(cfg: *mut RmmrConfig, steps: usize) -> RmmrStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| fail(RmmrStatus::NullPointer, "cfg is null"))?;
        if steps == 0 {
            return Err(fail(RmmrStatus::InvalidArgument, "total_steps must be >= 1"));
        }
        cfg.inner.train.total_steps = steps;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rmmr_config_free(cfg: *mut RmmrConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the corpus described by `cfg` from its seed.
///
/// # Safety
/// `cfg` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rmmr_corpus_generate(cfg: *const RmmrConfig, out: *mut *mut RmmrCorpus) -> RmmrStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let samples = lift(generate_corpus(&cfg.inner.corpus, cfg.inner.seed))?;
        put(out, RmmrCorpus { samples }, "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rmmr_corpus_read(path: *const c_char, out: *mut *mut RmmrCorpus) -> RmmrStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let samples = lift(read_corpus(path))?;
        put(out, RmmrCorpus { samples }, "out")
    })
}

/// # Safety
/// `corpus` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rmmr_corpus_write(corpus: *const RmmrCorpus, path: *const c_char) -> RmmrStatus {
    guard(|| {
        let corpus = ref_arg(corpus, "corpus")?;
        let path = str_arg(path, "path")?;
        lift(write_corpus(&corpus.samples, path))
    })
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rmmr_corpus_len(corpus: *const RmmrCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.samples.len())
}

/// Class label of sample `index`, written to `out`.
///
/// # Safety
/// `corpus` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rmmr_corpus_label(corpus: *const RmmrCorpus, index: usize, out: *mut usize) -> RmmrStatus {
    guard(|| {
        let corpus = ref_arg(corpus, "corpus")?;
        let s = corpus
            .samples
            .get(index)
            .ok_or_else(|| fail(RmmrStatus::InvalidArgument, format!("index {index} out of range")))?;
        if out.is_null() {
            return Err(fail(RmmrStatus::NullPointer, "out is null"));
        }
        *out = s.class_label;
        Ok(())
    })
}

/// # Safety
/// `corpus` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rmmr_corpus_free(corpus: *mut RmmrCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Trains from scratch for the configured number of steps.
///
/// # Safety
/// `cfg` and `corpus` must be live handles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rmmr_train(
    cfg: *const RmmrConfig,
    corpus: *const RmmrCorpus,
    out: *mut *mut RmmrCheckpoint,
) -> RmmrStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let corpus = ref_arg(corpus, "corpus")?;
        let (inner, _) = lift(train_run(&cfg.inner.job(), &corpus.samples))?;
        put(out, RmmrCheckpoint { inner }, "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rmmr_checkpoint_load(path: *const c_char, out: *mut *mut RmmrCheckpoint) -> RmmrStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = lift(Checkpoint::load(path))?;
        put(out, RmmrCheckpoint { inner }, "out")
    })
}

/// # Safety
/// `ckpt` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rmmr_checkpoint_save(ckpt: *const RmmrCheckpoint, path: *const c_char) -> RmmrStatus {
    guard(|| {
        let ckpt = ref_arg(ckpt, "ckpt")?;
        let path = str_arg(path, "path")?;
        lift(ckpt.inner.save(path))
    })
}

/// Number of completed updates; 0 for a null handle.
///
/// # Safety
/// `ckpt` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rmmr_checkpoint_step(ckpt: *const RmmrCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.inner.step)
}

/// Embedding width of the checkpoint's model; 0 for a null handle.
///
/// # Safety
/// `ckpt` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rmmr_checkpoint_embed_dim(ckpt: *const RmmrCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.inner.model.config.embed_dim)
}

/// # Safety
/// `ckpt` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rmmr_checkpoint_free(ckpt: *mut RmmrCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Fused embeddings of every sample at `severity`, row-major `n × d` into
/// `out`. `out_len` receives `n·d`; when `cap` is smaller nothing is written
/// and `BufferTooSmall` is returned.
///
/// # Safety
/// Handles must be live; `out` must point to `cap` writable doubles (or be
/// null with `cap == 0`); `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rmmr_embed(
    ckpt: *const RmmrCheckpoint,
    corpus: *const RmmrCorpus,
    severity: f64,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> RmmrStatus {
    guard(|| {
        let ckpt = ref_arg(ckpt, "ckpt")?;
        let corpus = ref_arg(corpus, "corpus")?;
        if out_len.is_null() {
            return Err(fail(RmmrStatus::NullPointer, "out_len is null"));
        }
        let emb = lift(embed_checkpoint(&ckpt.inner, &corpus.samples, severity))?;
        let flat: Vec<f64> = emb.into_iter().flat_map(|e| e.z).collect();
        *out_len = flat.len();
        if cap < flat.len() || (out.is_null() && !flat.is_empty()) {
            return Err(fail(RmmrStatus::BufferTooSmall, format!("need {} doubles, got {cap}", flat.len())));
        }
        ptr::copy_nonoverlapping(flat.as_ptr(), out, flat.len());
        Ok(())
    })
}

/// Absolute percentage-point drop `acc_id − acc_cd`.
#[no_mangle]
pub extern "C" fn rmmr_domain_drop(acc_id: f64, acc_cd: f64) -> f64 {
    domain_drop(acc_id, acc_cd)
}

/// Warmup/decay learning rate at `step`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rmmr_lr_at(step: usize, total_steps: usize, warmup_ratio: f64, base_lr: f64, out: *mut f64) -> RmmrStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(RmmrStatus::NullPointer, "out is null"));
        }
        *out = lift(lr_at(step, total_steps, warmup_ratio, base_lr))?;
        Ok(())
    })
}
