//! C ABI over the gode library.
//!
//! Conventions: every function returns a `GodeStatus`; results come back
//! through out-pointers. Models are opaque handles owned by the caller and
//! released with `gode_model_free`. On any non-OK status,
//! `gode_last_error` returns a thread-local message valid until the next
//! failing call on that thread. Models run in f64 behind this interface.
//!
//! The matching header is `include/gode.h`, maintained by hand.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gode::bspline::BSplineBasis;
use gode::checkpoint;
use gode::error::GodeError;
use gode::model::{Model, ModelSpec};
use gode::tensor::{tape::Tape, Tensor};

/// Status codes shared with the C header.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GodeStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Compute = 4,
}

pub struct GodeModel {
    inner: Model<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let safe = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(safe).unwrap_or_else(|_| CString::new("error").unwrap());
    });
}

fn fail(status: GodeStatus, msg: &str) -> GodeStatus {
    set_error(msg);
    status
}

fn status_of(err: &GodeError) -> GodeStatus {
    match err {
        GodeError::Io(_) | GodeError::Format { .. } | GodeError::Checkpoint(_) => GodeStatus::Io,
        GodeError::Config(_) | GodeError::InvalidBasis { .. } | GodeError::Domain { .. } => {
            GodeStatus::InvalidArgument
        }
        _ => GodeStatus::Compute,
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or null.
unsafe fn cstr<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        return None;
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().ok()
}

fn guarded(f: impl FnOnce() -> GodeStatus) -> GodeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(GodeStatus::Compute, "internal panic"),
    }
}

/// Last error message for this thread; empty string when no error occurred.
#[no_mangle]
pub extern "C" fn gode_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn gode_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Build a model from a JSON `ModelSpec` document with deterministic
/// seed-derived initialization.
///
/// # Safety
/// `spec_json` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gode_model_build(
    spec_json: *const c_char,
    seed: u64,
    out: *mut *mut GodeModel,
) -> GodeStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GodeStatus::NullArgument, "out pointer is null");
        }
        let Some(json) = (unsafe { cstr(spec_json) }) else {
            return fail(GodeStatus::NullArgument, "spec_json is null or not UTF-8");
        };
        let spec: ModelSpec = match serde_json::from_str(json) {
            Ok(s) => s,
            Err(e) => return fail(GodeStatus::InvalidArgument, &format!("spec parse: {e}")),
        };
        match Model::<f64>::build(&spec, seed) {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(GodeModel { inner: model })) };
                GodeStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Load a `GODE-CKPT-v1` checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gode_model_load(
    path: *const c_char,
    out: *mut *mut GodeModel,
) -> GodeStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GodeStatus::NullArgument, "out pointer is null");
        }
        let Some(path) = (unsafe { cstr(path) }) else {
            return fail(GodeStatus::NullArgument, "path is null or not UTF-8");
        };
        match checkpoint::load::<f64>(Path::new(path)) {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(GodeModel { inner: model })) };
                GodeStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Write the model as a `GODE-CKPT-v1` checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gode_model_save(
    model: *const GodeModel,
    path: *const c_char,
) -> GodeStatus {
    guarded(|| {
        let Some(model) = (unsafe { model.as_ref() }) else {
            return fail(GodeStatus::NullArgument, "model is null");
        };
        let Some(path) = (unsafe { cstr(path) }) else {
            return fail(GodeStatus::NullArgument, "path is null or not UTF-8");
        };
        match checkpoint::save(&model.inner, Path::new(path)) {
            Ok(()) => GodeStatus::Ok,
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gode_model_free(model: *mut GodeModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of output classes.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gode_model_num_classes(
    model: *const GodeModel,
    out: *mut usize,
) -> GodeStatus {
    guarded(|| {
        let (Some(model), false) = (unsafe { model.as_ref() }, out.is_null()) else {
            return fail(GodeStatus::NullArgument, "null argument");
        };
        unsafe { *out = model.inner.spec.num_classes };
        GodeStatus::Ok
    })
}

/// Exact count of trainable scalars.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gode_model_param_count(
    model: *const GodeModel,
    out: *mut u64,
) -> GodeStatus {
    guarded(|| {
        let (Some(model), false) = (unsafe { model.as_ref() }, out.is_null()) else {
            return fail(GodeStatus::NullArgument, "null argument");
        };
        unsafe { *out = model.inner.param_count() as u64 };
        GodeStatus::Ok
    })
}

/// Forward pass. `input` is NCHW row-major with `n*c*h*w` doubles;
/// `logits_out` receives `n * num_classes` doubles.
///
/// # Safety
/// Buffers must match the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn gode_model_forward(
    model: *const GodeModel,
    input: *const f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    logits_out: *mut f64,
    logits_len: usize,
) -> GodeStatus {
    guarded(|| {
        let Some(model) = (unsafe { model.as_ref() }) else {
            return fail(GodeStatus::NullArgument, "model is null");
        };
        if input.is_null() || logits_out.is_null() {
            return fail(GodeStatus::NullArgument, "buffer pointer is null");
        }
        let expect = n * model.inner.spec.num_classes;
        if logits_len != expect {
            return fail(
                GodeStatus::InvalidArgument,
                &format!("logits buffer holds {logits_len} values, need {expect}"),
            );
        }
        let data = unsafe { std::slice::from_raw_parts(input, n * c * h * w) }.to_vec();
        let x = match Tensor::from_vec(vec![n, c, h, w], data) {
            Ok(x) => x,
            Err(e) => return fail(GodeStatus::InvalidArgument, &e.to_string()),
        };
        let tape = Tape::inference();
        match model.inner.forward(&tape, &x) {
            Ok(logits) => {
                let values = logits.to_vec();
                unsafe {
                    std::ptr::copy_nonoverlapping(values.as_ptr(), logits_out, values.len());
                }
                GodeStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Evaluate all `n_control` basis functions of a clamped uniform B-spline of
/// the given degree over `[0, t_max]` at `t`. `out` receives `n_control`
/// doubles.
///
/// # Safety
/// `out` must hold `n_control` doubles.
#[no_mangle]
pub unsafe extern "C" fn gode_basis_eval(
    degree: u32,
    n_control: u32,
    t_max: f64,
    t: f64,
    out: *mut f64,
) -> GodeStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GodeStatus::NullArgument, "out buffer is null");
        }
        let basis = match BSplineBasis::clamped_uniform(degree as usize, n_control as usize, t_max)
        {
            Ok(b) => b,
            Err(e) => return fail(status_of(&e), &e.to_string()),
        };
        match basis.eval(t) {
            Ok(weights) => {
                unsafe { std::ptr::copy_nonoverlapping(weights.as_ptr(), out, weights.len()) };
                GodeStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}
