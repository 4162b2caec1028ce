//! C ABI over the edgeloop runtime.
//!
//! Every function returns an [`EdgeloopStatus`]. On failure a description is
//! kept per thread and can be read with [`edgeloop_last_error`]. Handles are
//! opaque; release them with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use edgeloop::error::{Error, FormatError};
use edgeloop::exchange::{check_references, rewrite_bytes, validate_ops, ExchangeFile, OpSupportTable};
use edgeloop::preprocess::{decode_ppm, Image};
use edgeloop::runtime::{load_session, Prediction, RuntimeSession};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeloopStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed image or image data.
    Data = 4,
    /// Malformed exchange file.
    Format = 5,
    /// The model uses an operator or attribute the runtime does not support.
    Unsupported = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// A loaded model.
pub struct EdgeloopSession {
    inner: RuntimeSession,
}

/// Bytes owned by the library.
pub struct EdgeloopBuffer {
    bytes: Vec<u8>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EdgeloopPrediction {
    pub class_id: u32,
    /// Confidence of `class_id`, in percent.
    pub confidence_pct: f64,
    pub latency_ms: f64,
    pub preprocess_ms: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

fn fail(status: EdgeloopStatus, msg: impl AsRef<str>) -> EdgeloopStatus {
    set_error(msg.as_ref());
    status
}

fn status_of(e: &Error) -> EdgeloopStatus {
    match e {
        Error::Format(FormatError::UnsupportedOp { .. } | FormatError::BadNode { .. }) => EdgeloopStatus::Unsupported,
        Error::Format(_) | Error::Checkpoint(_) => EdgeloopStatus::Format,
        Error::Ppm(_) | Error::Data(_) | Error::DegenerateChannel { .. } => EdgeloopStatus::Data,
        Error::Io(_) => EdgeloopStatus::Io,
        Error::Dimension { .. } | Error::InvalidArgument { .. } | Error::Config(_) | Error::Settings(_) => {
            EdgeloopStatus::InvalidArgument
        }
        Error::Diverged { .. } | Error::TapeConsumed => EdgeloopStatus::Internal,
    }
}

/// Run `f`, turning errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), EdgeloopStatus>) -> EdgeloopStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EdgeloopStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(EdgeloopStatus::Internal, "internal panic"),
    }
}

fn lift<T>(r: edgeloop::Result<T>) -> Result<T, EdgeloopStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], EdgeloopStatus> {
    if data.is_null() {
        return Err(fail(EdgeloopStatus::NullArgument, "data pointer is null"));
    }
    // SAFETY: the caller guarantees `data` points to `len` readable bytes.
    Ok(unsafe { std::slice::from_raw_parts(data, len) })
}

unsafe fn session<'a>(s: *const EdgeloopSession) -> Result<&'a RuntimeSession, EdgeloopStatus> {
    // SAFETY: a non-null handle came from a load function and was not freed.
    unsafe { s.as_ref() }
        .map(|s| &s.inner)
        .ok_or_else(|| fail(EdgeloopStatus::NullArgument, "session handle is null"))
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn edgeloop_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn edgeloop_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load an exchange file from memory. The file is validated against the
/// default support table before anything runs.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` to writable storage
/// for one pointer.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_session_load(
    data: *const u8,
    len: usize,
    out: *mut *mut EdgeloopSession,
) -> EdgeloopStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(EdgeloopStatus::NullArgument, "out pointer is null"));
        }
        // SAFETY: forwarded caller contract.
        let bytes = unsafe { bytes(data, len)? };
        let inner = lift(load_session(bytes, &OpSupportTable::default_table()))?;
        // SAFETY: `out` is non-null and writable per the contract.
        unsafe { *out = Box::into_raw(Box::new(EdgeloopSession { inner })) };
        Ok(())
    })
}

/// Load an exchange file from a path.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable storage for one
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_session_load_file(
    path: *const c_char,
    out: *mut *mut EdgeloopSession,
) -> EdgeloopStatus {
    guard(|| {
        if path.is_null() {
            return Err(fail(EdgeloopStatus::NullArgument, "path is null"));
        }
        // SAFETY: caller passes a NUL-terminated string.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(EdgeloopStatus::InvalidArgument, "path is not UTF-8"))?;
        let data = std::fs::read(path).map_err(|e| fail(EdgeloopStatus::Io, format!("{path}: {e}")))?;
        // SAFETY: `data` is a live slice; `out` is forwarded.
        match unsafe { edgeloop_session_load(data.as_ptr(), data.len(), out) } {
            EdgeloopStatus::Ok => Ok(()),
            other => Err(other),
        }
    })
}

/// Release a session. Null is ignored.
///
/// # Safety
/// `s` must come from a load function and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_session_free(s: *mut EdgeloopSession) {
    if !s.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(s) });
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live session.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_session_num_classes(s: *const EdgeloopSession) -> usize {
    // SAFETY: forwarded caller contract.
    unsafe { s.as_ref() }.map_or(0, |s| s.inner.num_classes())
}

/// Size of the loaded file in bytes, or 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live session.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_session_storage_bytes(s: *const EdgeloopSession) -> u64 {
    // SAFETY: forwarded caller contract.
    unsafe { s.as_ref() }.map_or(0, |s| s.inner.storage_bytes())
}

/// Side length of the model input, or 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live session.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_session_image_size(s: *const EdgeloopSession) -> usize {
    // SAFETY: forwarded caller contract.
    unsafe { s.as_ref() }.map_or(0, |s| s.inner.spec().target_size)
}

unsafe fn emit(
    p: &Prediction,
    out: *mut EdgeloopPrediction,
    confidences: *mut f64,
    capacity: usize,
) -> Result<(), EdgeloopStatus> {
    if out.is_null() {
        return Err(fail(EdgeloopStatus::NullArgument, "prediction pointer is null"));
    }
    if !confidences.is_null() {
        if capacity < p.confidences.len() {
            return Err(fail(
                EdgeloopStatus::BufferTooSmall,
                format!("confidence buffer holds {capacity}, need {}", p.confidences.len()),
            ));
        }
        // SAFETY: the caller provides `capacity` writable doubles.
        unsafe { ptr::copy_nonoverlapping(p.confidences.as_ptr(), confidences, p.confidences.len()) };
    }
    // SAFETY: `out` is non-null and writable per the contract.
    unsafe {
        *out = EdgeloopPrediction {
            class_id: p.class_id as u32,
            confidence_pct: p.confidence(),
            latency_ms: p.latency.as_secs_f64() * 1e3,
            preprocess_ms: p.preprocess_time.as_secs_f64() * 1e3,
        }
    };
    Ok(())
}

/// Classify a binary PPM image. `confidences` may be null; otherwise it
/// receives one percentage per class and must hold `capacity >= num_classes`.
///
/// # Safety
/// `data` must point to `len` readable bytes, `out` to one writable
/// prediction, and `confidences` (if non-null) to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_predict_ppm(
    s: *const EdgeloopSession,
    data: *const u8,
    len: usize,
    out: *mut EdgeloopPrediction,
    confidences: *mut f64,
    capacity: usize,
) -> EdgeloopStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let (sess, bytes) = unsafe { (session(s)?, bytes(data, len)?) };
        let img = lift(decode_ppm(bytes).map_err(Error::from))?;
        let p = lift(sess.predict(&img))?;
        // SAFETY: forwarded caller contract.
        unsafe { emit(&p, out, confidences, capacity) }
    })
}

/// Classify interleaved 8-bit RGB pixels, row-major, `width * height * 3` bytes.
///
/// # Safety
/// As [`edgeloop_predict_ppm`], with `pixels` holding `width * height * 3` bytes.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_predict_rgb(
    s: *const EdgeloopSession,
    pixels: *const u8,
    width: usize,
    height: usize,
    out: *mut EdgeloopPrediction,
    confidences: *mut f64,
    capacity: usize,
) -> EdgeloopStatus {
    guard(|| {
        let len = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| fail(EdgeloopStatus::InvalidArgument, "image dimensions overflow"))?;
        // SAFETY: forwarded caller contract.
        let (sess, bytes) = unsafe { (session(s)?, bytes(pixels, len)?) };
        let img = lift(Image::new(width, height, bytes.to_vec()))?;
        let p = lift(sess.predict(&img))?;
        // SAFETY: forwarded caller contract.
        unsafe { emit(&p, out, confidences, capacity) }
    })
}

/// Count support violations of an exchange file against the default table.
/// Returns `Ok` with the count for any well-formed file.
///
/// # Safety
/// `data` must point to `len` readable bytes and `violations` to one
/// writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_check(data: *const u8, len: usize, violations: *mut usize) -> EdgeloopStatus {
    guard(|| {
        if violations.is_null() {
            return Err(fail(EdgeloopStatus::NullArgument, "violations pointer is null"));
        }
        // SAFETY: forwarded caller contract.
        let bytes = unsafe { bytes(data, len)? };
        let file = lift(ExchangeFile::decode(bytes).map_err(Error::from))?;
        lift(check_references(&file).map_err(Error::from))?;
        let found = validate_ops(&file, &OpSupportTable::default_table());
        if let Some(first) = found.first() {
            set_error(&first.to_string());
        }
        // SAFETY: non-null and writable per the contract.
        unsafe { *violations = found.len() };
        Ok(())
    })
}

/// Rewrite flattening `Reshape` nodes into `Flatten`. The result is a new
/// buffer, identical to the input when there was nothing to rewrite.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` to writable storage
/// for one pointer.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_rewrite(
    data: *const u8,
    len: usize,
    out: *mut *mut EdgeloopBuffer,
) -> EdgeloopStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(EdgeloopStatus::NullArgument, "out pointer is null"));
        }
        // SAFETY: forwarded caller contract.
        let bytes = unsafe { bytes(data, len)? };
        let rewritten = lift(rewrite_bytes(bytes))?;
        // SAFETY: non-null and writable per the contract.
        unsafe { *out = Box::into_raw(Box::new(EdgeloopBuffer { bytes: rewritten })) };
        Ok(())
    })
}

/// Start of the buffer's bytes, or null for a null handle.
///
/// # Safety
/// `b` must be null or a live buffer.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_buffer_data(b: *const EdgeloopBuffer) -> *const u8 {
    // SAFETY: forwarded caller contract.
    unsafe { b.as_ref() }.map_or(ptr::null(), |b| b.bytes.as_ptr())
}

/// # Safety
/// `b` must be null or a live buffer.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_buffer_len(b: *const EdgeloopBuffer) -> usize {
    // SAFETY: forwarded caller contract.
    unsafe { b.as_ref() }.map_or(0, |b| b.bytes.len())
}

/// Release a buffer. Null is ignored.
///
/// # Safety
/// `b` must come from [`edgeloop_rewrite`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn edgeloop_buffer_free(b: *mut EdgeloopBuffer) {
    if !b.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(b) });
    }
}
