//! C ABI over `plmcast`: load a checkpoint, query its shape, forecast raw windows,
//! and compute the evaluation metrics.
//!
//! Every fallible function returns a [`PlmcastStatus`]. On failure the message is
//! kept per thread and read with [`plmcast_last_error_message`]. Panics never
//! cross the boundary; they are reported as `PLMCAST_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::ArrayView2;
use plmcast::evaluation::{cka, metrics};
use plmcast::{checkpoint, pipeline, Error, Model};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlmcastStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Load = 4,
    Shape = 5,
    Numeric = 6,
    Internal = 7,
}

/// A loaded model. Only ever handled through a pointer.
pub struct PlmcastModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> PlmcastStatus {
    match e {
        Error::Io { .. } => PlmcastStatus::Io,
        Error::Load { .. } | Error::Json(_) => PlmcastStatus::Load,
        Error::Shape(_) => PlmcastStatus::Shape,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => PlmcastStatus::Numeric,
        Error::Config(_) | Error::Policy(_) | Error::Description(_) => PlmcastStatus::InvalidArgument,
        _ => PlmcastStatus::Internal,
    }
}

struct Fail(PlmcastStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PlmcastStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus the thread's message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PlmcastStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PlmcastStatus::Ok
        }
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {message}"));
            PlmcastStatus::Internal
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn model_ref<'a>(model: *const PlmcastModel) -> Result<&'a Model, Fail> {
    model.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn plmcast_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn plmcast_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Loads a checkpoint file. On success `*out` owns a model that must be released
/// with [`plmcast_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn plmcast_model_load(path: *const c_char, out: *mut *mut PlmcastModel) -> PlmcastStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(PlmcastStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (model, _) = checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(PlmcastModel { model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`plmcast_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn plmcast_model_free(model: *mut PlmcastModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of channels `C`; 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn plmcast_model_channels(model: *const PlmcastModel) -> usize {
    model_ref(model).map_or(0, |m| m.channels())
}

/// Input length `T`; 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn plmcast_model_input_len(model: *const PlmcastModel) -> usize {
    model_ref(model).map_or(0, |m| m.config().input_len)
}

/// Horizon `F`; 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn plmcast_model_horizon(model: *const PlmcastModel) -> usize {
    model_ref(model).map_or(0, |m| m.config().horizon)
}

/// Forecasts `n_windows` raw windows laid out `[n_windows, C, T]` into `output`
/// laid out `[n_windows, C, F]`. `output_len` must equal `n_windows * C * F`.
///
/// # Safety
/// `input` must hold `n_windows * C * T` values and `output` `output_len` values.
#[no_mangle]
pub unsafe extern "C" fn plmcast_predict(
    model: *const PlmcastModel,
    input: *const f64,
    n_windows: usize,
    output: *mut f64,
    output_len: usize,
) -> PlmcastStatus {
    guard(|| {
        let m = model_ref(model)?;
        if output.is_null() {
            return Err(null("output"));
        }
        if n_windows == 0 {
            return Err(Fail(PlmcastStatus::InvalidArgument, "no windows".into()));
        }
        let (c, t, f) = (m.channels(), m.config().input_len, m.config().horizon);
        let want = n_windows * c * f;
        if output_len != want {
            return Err(Fail(PlmcastStatus::Shape, format!("output holds {output_len} values, need {want}")));
        }
        let values = slice(input, n_windows * c * t, "input")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Fail(PlmcastStatus::Numeric, "input contains non-finite values".into()));
        }
        let windows: Vec<Vec<f64>> = values.chunks(c * t).map(<[f64]>::to_vec).collect();
        let pred = pipeline::forecast(m, &windows)?;
        std::slice::from_raw_parts_mut(output, want).copy_from_slice(&pred);
        Ok(())
    })
}

/// Mean squared error of two length-`len` arrays.
///
/// # Safety
/// `pred` and `truth` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn plmcast_mse(pred: *const f64, truth: *const f64, len: usize, out: *mut f64) -> PlmcastStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics::mse(slice(pred, len, "pred")?, slice(truth, len, "truth")?)?;
        Ok(())
    })
}

/// Mean absolute error of two length-`len` arrays.
///
/// # Safety
/// As for [`plmcast_mse`].
#[no_mangle]
pub unsafe extern "C" fn plmcast_mae(pred: *const f64, truth: *const f64, len: usize, out: *mut f64) -> PlmcastStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics::mae(slice(pred, len, "pred")?, slice(truth, len, "truth")?)?;
        Ok(())
    })
}

/// Linear CKA between row-major `x` (`n x dx`) and `y` (`n x dy`).
///
/// # Safety
/// `x` must hold `n * dx` values, `y` `n * dy`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn plmcast_linear_cka(
    x: *const f64,
    y: *const f64,
    n: usize,
    dx: usize,
    dy: usize,
    out: *mut f64,
) -> PlmcastStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = |e: ndarray::ShapeError| Fail(PlmcastStatus::Shape, e.to_string());
        let xv = ArrayView2::from_shape((n, dx), slice(x, n * dx, "x")?).map_err(shape)?;
        let yv = ArrayView2::from_shape((n, dy), slice(y, n * dy, "y")?).map_err(shape)?;
        *out = cka::linear_cka(&xv.to_owned(), &yv.to_owned())?;
        Ok(())
    })
}
