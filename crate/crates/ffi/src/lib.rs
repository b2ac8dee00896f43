//! C ABI over `saliency-sanity`.
//!
//! Models and saliency maps cross the boundary as opaque handles that the
//! caller frees with the matching `*_free` function. Every fallible call
//! returns an [`SsStatus`]; on failure, [`ss_last_error`] copies a message
//! for the calling thread. Panics are caught and reported as
//! [`SsStatus::Panic`], never unwound into C.
//!
//! Strings are NUL-terminated UTF-8. Inputs are flat `double` arrays in the
//! model's input layout (`[1, 28, 28]` for MNIST models, row-major).

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use saliency_sanity::metrics::{self, MetricConfig, MetricId};
use saliency_sanity::saliency::{self, Method, MethodConfig, SaliencyMap};
use saliency_sanity::{Error, Model, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad argument value: unknown method or metric, wrong input length,
    /// class out of range, mismatched map shapes.
    InvalidArgument = 3,
    Io = 4,
    /// Malformed checkpoint or data file.
    Data = 5,
    /// The method is not defined for this architecture (GradCAM without a
    /// convolution).
    MethodUndefined = 6,
    /// Non-finite values or divergence inside the engine.
    Numeric = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A trained or randomized network.
pub struct SsModel(Model);

/// A saliency map with its method and target class.
pub struct SsMap(SaliencyMap);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> SsStatus {
    match err {
        Error::Io { .. } => SsStatus::Io,
        Error::BadMagic { .. }
        | Error::PayloadMismatch { .. }
        | Error::CountMismatch { .. }
        | Error::Checkpoint(_)
        | Error::Json(_)
        | Error::Csv(_) => SsStatus::Data,
        Error::MethodUndefined { .. } => SsStatus::MethodUndefined,
        Error::NonFinite(_) | Error::Diverged { .. } => SsStatus::Numeric,
        _ => SsStatus::InvalidArgument,
    }
}

struct Fail(SsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            SsStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn input_tensor(model: &Model, input: *const f64, len: usize) -> Result<Tensor, Fail> {
    if input.is_null() {
        return Err(null("input"));
    }
    let shape = model.input_shape().to_vec();
    let want: usize = shape.iter().product();
    if len != want {
        return Err(Fail(SsStatus::InvalidArgument, format!("input has {len} values, model expects {want}")));
    }
    Ok(Tensor::new(shape, std::slice::from_raw_parts(input, len).to_vec())?)
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `cap > 0`). Returns the full message length
/// in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ss_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a `model.json` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load(path: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, SsModel(Model::load(Path::new(path))?))
    })
}

/// Parses a checkpoint from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_from_json(json: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        put(out, SsModel(Model::from_json(text)?))
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(model: *mut SsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of `double`s in one input. Zero for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_model_input_len(model: *const SsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.input_shape().iter().product())
}

/// Zero for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_model_num_classes(model: *const SsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_classes())
}

/// Writes the argmax class for one input.
///
/// # Safety
/// `input` must hold `len` doubles; `class_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_predict(model: *const SsModel, input: *const f64, len: usize, class_out: *mut usize) -> SsStatus {
    guard(|| {
        let model = &obj(model, "model")?.0;
        let x = input_tensor(model, input, len)?;
        let class = model.resolve_class(&x, None)?;
        if class_out.is_null() {
            return Err(null("class_out"));
        }
        *class_out = class;
        Ok(())
    })
}

/// Copy of `model` with the comma-separated layers (e.g. `"fc2,fc1"`)
/// re-initialized from `seed`.
///
/// # Safety
/// `layers` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_randomize(model: *const SsModel, layers: *const c_char, seed: u64, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let model = &obj(model, "model")?.0;
        let names: Vec<&str> = str_arg(layers, "layers")?.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        put(out, SsModel(model.randomize_layers(&names, seed)?))
    })
}

/// Computes an unnormalized saliency map. `method` uses the CLI names
/// (`gradient`, `smoothgrad`, `vargrad`, `gradient_input`,
/// `integrated_gradients`, `guided_backprop`, `gradcam`, `guided_gradcam`,
/// or `smoothgrad:<base>` / `vargrad:<base>`). A negative `class` explains
/// the predicted class. `seed` drives SmoothGrad and VarGrad noise; other
/// parameters take their defaults.
///
/// # Safety
/// `input` must hold `len` doubles; `method` must be a NUL-terminated
/// string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_explain(
    model: *const SsModel,
    input: *const f64,
    len: usize,
    method: *const c_char,
    class: i64,
    seed: u64,
    out: *mut *mut SsMap,
) -> SsStatus {
    guard(|| {
        let model = &obj(model, "model")?.0;
        let x = input_tensor(model, input, len)?;
        let method: Method = str_arg(method, "method")?.parse()?;
        let class = usize::try_from(class).ok();
        let mut cfg = MethodConfig::default();
        cfg.smoothing.seed = seed;
        put(out, SsMap(saliency::explain(model, &x, class, method, &cfg)?))
    })
}

/// # Safety
/// `map` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ss_map_free(map: *mut SsMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Number of values in the map. Zero for a null handle.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_map_len(map: *const SsMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.values.len())
}

/// The class the map explains.
///
/// # Safety
/// `map` must be a live handle; `class_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_map_class(map: *const SsMap, class_out: *mut usize) -> SsStatus {
    guard(|| {
        let map = &obj(map, "map")?.0;
        if class_out.is_null() {
            return Err(null("class_out"));
        }
        *class_out = map.class;
        Ok(())
    })
}

/// Copies the map's values (row-major) into `buf`.
///
/// # Safety
/// `buf` must be valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn ss_map_values(map: *const SsMap, buf: *mut f64, cap: usize) -> SsStatus {
    guard(|| {
        let values = obj(map, "map")?.0.values.data();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if cap < values.len() {
            return Err(Fail(SsStatus::BufferTooSmall, format!("buffer holds {cap} values, map has {}", values.len())));
        }
        std::ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
        Ok(())
    })
}

/// Similarity of two maps after normalization. `metric` is one of
/// `spearman_abs`, `spearman_noabs`, `ssim`, `hog_pearson`. When either
/// map is constant the value is 0 and `degenerate_out` is set.
///
/// # Safety
/// `metric` must be a NUL-terminated string; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_compare(a: *const SsMap, b: *const SsMap, metric: *const c_char, value_out: *mut f64, degenerate_out: *mut bool) -> SsStatus {
    guard(|| {
        let (a, b) = (&obj(a, "a")?.0, &obj(b, "b")?.0);
        let metric: MetricId = str_arg(metric, "metric")?.parse()?;
        let v = metrics::compare(a, b, metric, &MetricConfig::default())?;
        if value_out.is_null() || degenerate_out.is_null() {
            return Err(null("output"));
        }
        *value_out = v.value;
        *degenerate_out = v.degenerate;
        Ok(())
    })
}
