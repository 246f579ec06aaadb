//! C ABI for the FCN toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style functions and released by the matching `*_free`. Fallible calls
//! return an [`FcnStatus`]; on failure the message is available from
//! [`fcn_last_error_message`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fcn_instruct::atlas::AtlasPartition;
use fcn_instruct::eval::{parse_response, AnswerKind, Prediction};
use fcn_instruct::fcn::io::{read_fcn, write_fcn};
use fcn_instruct::fcn::{pearson_from_samples, window_count, FcnMatrix};
use fcn_instruct::instruct::normalize_value;
use fcn_instruct::pipeline::answer_prompt;
use fcn_instruct::toylm::Tokenizer;
use fcn_instruct::training::checkpoint::load_checkpoint;
use fcn_instruct::training::ModelParams;
use fcn_instruct::Error;
use ndarray::ArrayView2;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Config = 4,
    Generation = 5,
    Dataset = 6,
    Training = 7,
    Format = 8,
    Io = 9,
    Panic = 10,
}

impl From<&Error> for FcnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => FcnStatus::InvalidInput,
            Error::Config(_) => FcnStatus::Config,
            Error::Generation(_) => FcnStatus::Generation,
            Error::Dataset(_) => FcnStatus::Dataset,
            Error::Training(_) => FcnStatus::Training,
            Error::Format { .. } => FcnStatus::Format,
            Error::Io { .. } => FcnStatus::Io,
        }
    }
}

/// Pearson connectivity matrix.
pub struct FcnMatrixHandle(FcnMatrix);

/// Region-to-subnetwork partition.
pub struct FcnAtlasHandle(AtlasPartition);

/// Trained encoder and language model with its vocabulary.
pub struct FcnModelHandle {
    model: ModelParams,
    tokenizer: Tokenizer,
    tau: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: FcnStatus, msg: impl Into<String>) -> FcnStatus {
    set_error(msg);
    status
}

fn fail_with(e: Error) -> FcnStatus {
    let status = FcnStatus::from(&e);
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into [`FcnStatus::Panic`].
fn guard(f: impl FnOnce() -> FcnStatus) -> FcnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(FcnStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, FcnStatus> {
    if p.is_null() {
        return Err(fail(FcnStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FcnStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn null(name: &str) -> FcnStatus {
    fail(FcnStatus::NullArgument, format!("{name} is null"))
}

/// Message of the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fcn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn fcn_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fcn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of sliding windows of length `len` and stride `step` in `t`
/// samples; 0 when `len > t` or `step == 0`.
#[no_mangle]
pub extern "C" fn fcn_window_count(t: usize, len: usize, step: usize) -> usize {
    if step == 0 || len == 0 {
        return 0;
    }
    window_count(t, len, step)
}

/// Maps `x` in `[min, max]` to an integer in `0..=100`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `uint8_t`.
#[no_mangle]
pub unsafe extern "C" fn fcn_normalize_value(
    x: f64,
    min: f64,
    max: f64,
    out: *mut u8,
) -> FcnStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        match normalize_value(x, min, max) {
            Ok(v) => {
                *out = v;
                FcnStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Extracts a `0..=100` value from model output. Writes -1 when none is
/// found; that is not an error.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must point to one `int32_t`.
#[no_mangle]
pub unsafe extern "C" fn fcn_parse_value_response(text: *const c_char, out: *mut i32) -> FcnStatus {
    guard(|| {
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out.is_null() {
            return null("out");
        }
        *out = match parse_response(text, &AnswerKind::Value) {
            Prediction::Value(v) => i32::from(v),
            _ => -1,
        };
        FcnStatus::Ok
    })
}

/// Pearson FCN of a row-major `time_points x regions` BOLD array.
///
/// # Safety
/// `samples` must point to `time_points * regions` readable doubles and
/// `out` to a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn fcn_matrix_from_bold(
    samples: *const f64,
    time_points: usize,
    regions: usize,
    out: *mut *mut FcnMatrixHandle,
) -> FcnStatus {
    guard(|| {
        if samples.is_null() {
            return null("samples");
        }
        if out.is_null() {
            return null("out");
        }
        let Some(n) = time_points.checked_mul(regions) else {
            return fail(FcnStatus::InvalidInput, "time_points * regions overflows");
        };
        let data = std::slice::from_raw_parts(samples, n);
        let view = match ArrayView2::from_shape((time_points, regions), data) {
            Ok(v) => v,
            Err(e) => return fail(FcnStatus::InvalidInput, e.to_string()),
        };
        match pearson_from_samples(view) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(FcnMatrixHandle(m)));
                FcnStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Reads a binary FCN file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn fcn_matrix_read(
    path: *const c_char,
    out: *mut *mut FcnMatrixHandle,
) -> FcnStatus {
    guard(|| {
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            return null("out");
        }
        match read_fcn(Path::new(path)) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(FcnMatrixHandle(m)));
                FcnStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// # Safety
/// `matrix` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fcn_matrix_write(
    matrix: *const FcnMatrixHandle,
    path: *const c_char,
) -> FcnStatus {
    guard(|| {
        let Some(m) = matrix.as_ref() else {
            return null("matrix");
        };
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match write_fcn(&m.0, Path::new(path)) {
            Ok(()) => FcnStatus::Ok,
            Err(e) => fail_with(e),
        }
    })
}

/// Number of regions; 0 for a null handle.
///
/// # Safety
/// `matrix` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fcn_matrix_dim(matrix: *const FcnMatrixHandle) -> usize {
    matrix.as_ref().map_or(0, |m| m.0.dim())
}

/// Copies the row-major `dim x dim` values into `out`.
///
/// # Safety
/// `matrix` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fcn_matrix_values(
    matrix: *const FcnMatrixHandle,
    out: *mut f64,
    len: usize,
) -> FcnStatus {
    guard(|| {
        let Some(m) = matrix.as_ref() else {
            return null("matrix");
        };
        if out.is_null() {
            return null("out");
        }
        let d = m.0.dim();
        if len != d * d {
            return fail(
                FcnStatus::InvalidInput,
                format!("buffer holds {len} values, matrix has {}", d * d),
            );
        }
        let dst = std::slice::from_raw_parts_mut(out, len);
        for (o, v) in dst.iter_mut().zip(m.0.values().iter()) {
            *o = *v;
        }
        FcnStatus::Ok
    })
}

/// # Safety
/// `matrix` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fcn_matrix_free(matrix: *mut FcnMatrixHandle) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

/// Synthetic atlas: leading regions dealt to subnetworks in turn, the last
/// `unassigned` left out.
///
/// # Safety
/// `out` must be a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn fcn_atlas_round_robin(
    rois: usize,
    subnets: usize,
    unassigned: usize,
    out: *mut *mut FcnAtlasHandle,
) -> FcnStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        match AtlasPartition::round_robin(rois, subnets, unassigned) {
            Ok(a) => {
                *out = Box::into_raw(Box::new(FcnAtlasHandle(a)));
                FcnStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Reads an atlas CSV (`roi,subnet` rows).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn fcn_atlas_load(
    path: *const c_char,
    out: *mut *mut FcnAtlasHandle,
) -> FcnStatus {
    guard(|| {
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            return null("out");
        }
        match AtlasPartition::load(Path::new(path)) {
            Ok(a) => {
                *out = Box::into_raw(Box::new(FcnAtlasHandle(a)));
                FcnStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Tokens per FCN: regions, subnetworks and one global token.
///
/// # Safety
/// `atlas` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fcn_atlas_token_count(atlas: *const FcnAtlasHandle) -> usize {
    atlas.as_ref().map_or(0, |a| a.0.token_count())
}

/// # Safety
/// `atlas` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fcn_atlas_free(atlas: *mut FcnAtlasHandle) {
    if !atlas.is_null() {
        drop(Box::from_raw(atlas));
    }
}

/// Loads a trained checkpoint directory (one holding an encoder).
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn fcn_model_load(
    dir: *const c_char,
    out: *mut *mut FcnModelHandle,
) -> FcnStatus {
    guard(|| {
        let dir = match str_arg(dir, "dir") {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            return null("out");
        }
        let ckpt = match load_checkpoint(Path::new(dir)) {
            Ok(c) => c,
            Err(e) => return fail_with(e),
        };
        let Some(encoder) = ckpt.encoder else {
            return fail(
                FcnStatus::Dataset,
                format!("{dir} holds no trained encoder"),
            );
        };
        *out = Box::into_raw(Box::new(FcnModelHandle {
            model: ModelParams {
                encoder,
                lm: ckpt.lm,
            },
            tokenizer: ckpt.tokenizer,
            tau: ckpt.meta.tau,
        }));
        FcnStatus::Ok
    })
}

/// Greedy answer to `prompt`, whose `<fcn>` placeholders take `fcns` in
/// order. The string written to `out` must be released with
/// [`fcn_string_free`].
///
/// # Safety
/// `model` and `atlas` must be live handles, `fcns` must point to `n_fcns`
/// live matrix handles, `prompt` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fcn_model_answer(
    model: *const FcnModelHandle,
    atlas: *const FcnAtlasHandle,
    prompt: *const c_char,
    fcns: *const *const FcnMatrixHandle,
    n_fcns: usize,
    max_answer_len: usize,
    out: *mut *mut c_char,
) -> FcnStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return null("model");
        };
        let Some(a) = atlas.as_ref() else {
            return null("atlas");
        };
        let prompt = match str_arg(prompt, "prompt") {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            return null("out");
        }
        if n_fcns > 0 && fcns.is_null() {
            return null("fcns");
        }
        let mut matrices = Vec::with_capacity(n_fcns);
        for i in 0..n_fcns {
            match (*fcns.add(i)).as_ref() {
                Some(h) => matrices.push(h.0.clone()),
                None => return null("fcns[i]"),
            }
        }
        match answer_prompt(
            &m.model,
            &m.tokenizer,
            &a.0,
            m.tau,
            prompt,
            &matrices,
            max_answer_len,
        ) {
            Ok(text) => match CString::new(text) {
                Ok(c) => {
                    *out = c.into_raw();
                    FcnStatus::Ok
                }
                Err(e) => fail(FcnStatus::InvalidInput, e.to_string()),
            },
            Err(e) => fail_with(e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fcn_model_free(model: *mut FcnModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fcn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
