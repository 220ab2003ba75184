//! C ABI for `tsdr`.
//!
//! Stacks and models are opaque handles created and released by this library.
//! Every fallible function returns a [`TsdrStatus`]; on failure the message is
//! available from [`tsdr_last_error_message`] on the same thread until the next
//! call. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use tsdr::io::{
    read_model, read_stack, write_model, write_stack, ModelFile, Provenance, StackFormat,
};
use tsdr::{Error, FitConfig, Hybrid2SdrModel, ImageStack};

/// Opaque image stack.
pub struct TsdrStack {
    inner: ImageStack,
}

/// Opaque fitted 2SDR model.
pub struct TsdrModel {
    inner: ModelFile,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsdrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Degenerate = 3,
    SelectionFailed = 4,
    Format = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Fit options. Zero (or a non-positive `sigma2`) means "choose automatically".
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TsdrFitOptions {
    pub p_u: usize,
    pub q_u: usize,
    pub sigma2: f64,
    pub r_max: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> TsdrStatus {
    match err.root() {
        Error::InvalidInput(_) => TsdrStatus::InvalidInput,
        Error::DegenerateData(_) | Error::DegenerateSpectrum(_) => TsdrStatus::Degenerate,
        Error::SelectionFailed(_) => TsdrStatus::SelectionFailed,
        Error::Format { .. } | Error::Json(_) => TsdrStatus::Format,
        Error::Io(_) => TsdrStatus::Io,
        Error::Stage { .. } => TsdrStatus::InvalidInput,
    }
}

struct Fail(TsdrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TsdrStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, records any error or panic and converts it to a status.
fn guard(body: impl FnOnce() -> Result<(), Fail>) -> TsdrStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => TsdrStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TsdrStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Fail(TsdrStatus::InvalidInput, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn stack_ref<'a>(stack: *const TsdrStack) -> Result<&'a ImageStack, Fail> {
    stack
        .as_ref()
        .map(|s| &s.inner)
        .ok_or_else(|| null("stack"))
}

unsafe fn model_ref<'a>(model: *const TsdrModel) -> Result<&'a Hybrid2SdrModel, Fail> {
    model
        .as_ref()
        .map(|m| &m.inner.model)
        .ok_or_else(|| null("model"))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tsdr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn tsdr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Builds a stack from `n*p*q` doubles, each image stored row-major.
///
/// # Safety
/// `data` must point to `n*p*q` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsdr_stack_from_row_major(
    n: usize,
    p: usize,
    q: usize,
    data: *const f64,
    out: *mut *mut TsdrStack,
) -> TsdrStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let len = n
            .checked_mul(p)
            .and_then(|v| v.checked_mul(q))
            .ok_or_else(|| Fail(TsdrStatus::InvalidInput, "n*p*q overflows".into()))?;
        let values = std::slice::from_raw_parts(data, len);
        let inner = ImageStack::from_row_major(n, p, q, values)?;
        write_out(out, TsdrStack { inner })
    })
}

/// Reads a stack; the format follows the extension (`.mrc`/`.mrcs`, `.csv`, else container).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsdr_stack_read(
    path: *const c_char,
    out: *mut *mut TsdrStack,
) -> TsdrStatus {
    guard(|| {
        let path = path_arg(path)?;
        let inner = read_stack(&path, StackFormat::from_path(&path))?;
        write_out(out, TsdrStack { inner })
    })
}

/// Writes a stack; the format follows the extension.
///
/// # Safety
/// `stack` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tsdr_stack_write(
    stack: *const TsdrStack,
    path: *const c_char,
) -> TsdrStatus {
    guard(|| {
        let stack = stack_ref(stack)?;
        let path = path_arg(path)?;
        write_stack(stack, &path, StackFormat::from_path(&path), None)?;
        Ok(())
    })
}

/// # Safety
/// `stack` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsdr_stack_dims(
    stack: *const TsdrStack,
    n: *mut usize,
    p: *mut usize,
    q: *mut usize,
) -> TsdrStatus {
    guard(|| {
        let stack = stack_ref(stack)?;
        if n.is_null() || p.is_null() || q.is_null() {
            return Err(null("output pointer"));
        }
        let (rows, cols) = stack.dims();
        *n = stack.len();
        *p = rows;
        *q = cols;
        Ok(())
    })
}

/// Copies the `n*p*q` values (row-major per image) into `buf`.
///
/// # Safety
/// `buf` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tsdr_stack_copy_data(
    stack: *const TsdrStack,
    buf: *mut f64,
    len: usize,
) -> TsdrStatus {
    guard(|| {
        let stack = stack_ref(stack)?;
        let data = stack.to_row_major();
        copy_into(&data, buf, len)
    })
}

unsafe fn copy_into(data: &[f64], buf: *mut f64, len: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(null("buffer"));
    }
    if len < data.len() {
        return Err(Fail(
            TsdrStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", data.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    Ok(())
}

/// Releases a stack. NULL is ignored.
///
/// # Safety
/// `stack` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tsdr_stack_free(stack: *mut TsdrStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// Fits a 2SDR model. `options` may be NULL for all defaults.
///
/// # Safety
/// `stack` must be a live handle, `options` NULL or readable, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsdr_fit(
    stack: *const TsdrStack,
    options: *const TsdrFitOptions,
    out: *mut *mut TsdrModel,
) -> TsdrStatus {
    guard(|| {
        let stack = stack_ref(stack)?;
        let opts = options.as_ref().copied().unwrap_or_default();
        let nonzero = |v: usize| (v > 0).then_some(v);
        let config = FitConfig {
            p_u: nonzero(opts.p_u),
            q_u: nonzero(opts.q_u),
            sigma2: (opts.sigma2 > 0.0).then_some(opts.sigma2),
            r_max: nonzero(opts.r_max),
            ..FitConfig::default()
        };
        let model = tsdr::fit_2sdr(stack, &config)?;
        let inner = ModelFile {
            model,
            provenance: Provenance {
                input: None,
                config,
                version: env!("CARGO_PKG_VERSION").into(),
            },
        };
        write_out(out, TsdrModel { inner })
    })
}

/// # Safety
/// `model` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsdr_model_ranks(
    model: *const TsdrModel,
    p0: *mut usize,
    q0: *mut usize,
    r: *mut usize,
) -> TsdrStatus {
    guard(|| {
        let model = model_ref(model)?;
        if p0.is_null() || q0.is_null() || r.is_null() {
            return Err(null("output pointer"));
        }
        let (a, b, c) = model.ranks();
        *p0 = a;
        *q0 = b;
        *r = c;
        Ok(())
    })
}

/// Noise variance used for rank selection; NaN when none was recorded.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsdr_model_sigma2(model: *const TsdrModel, out: *mut f64) -> TsdrStatus {
    guard(|| {
        let model = model_ref(model)?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = model.sigma2().unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Writes the `n x r` score matrix row-major into `buf`.
///
/// # Safety
/// `buf` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tsdr_scores(
    model: *const TsdrModel,
    stack: *const TsdrStack,
    buf: *mut f64,
    len: usize,
) -> TsdrStatus {
    guard(|| {
        let model = model_ref(model)?;
        let stack = stack_ref(stack)?;
        let z = tsdr::scores(model, stack)?;
        let row_major: Vec<f64> = z.transpose().as_slice().to_vec();
        copy_into(&row_major, buf, len)
    })
}

/// Denoised copy of `stack` as a new handle.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsdr_denoise(
    model: *const TsdrModel,
    stack: *const TsdrStack,
    out: *mut *mut TsdrStack,
) -> TsdrStatus {
    guard(|| {
        let model = model_ref(model)?;
        let stack = stack_ref(stack)?;
        let inner = tsdr::denoise(model, stack)?;
        write_out(out, TsdrStack { inner })
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tsdr_model_save(
    model: *const TsdrModel,
    path: *const c_char,
) -> TsdrStatus {
    guard(|| {
        let file = model
            .as_ref()
            .map(|m| &m.inner)
            .ok_or_else(|| null("model"))?;
        let path = path_arg(path)?;
        write_model(file, &path)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsdr_model_load(
    path: *const c_char,
    out: *mut *mut TsdrModel,
) -> TsdrStatus {
    guard(|| {
        let path = path_arg(path)?;
        let inner = read_model(&path)?;
        write_out(out, TsdrModel { inner })
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tsdr_model_free(model: *mut TsdrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mean squared error between two stacks of equal shape.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsdr_mse(
    a: *const TsdrStack,
    b: *const TsdrStack,
    out: *mut f64,
) -> TsdrStatus {
    guard(|| {
        let a = stack_ref(a)?;
        let b = stack_ref(b)?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = tsdr::eval::mse(a, b)?;
        Ok(())
    })
}
