//! C ABI for the adversarial-example detector: load trained detector weights,
//! score images, and read back error messages. Handles are opaque; every
//! function returns a status code and writes results through out-pointers.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;

use pfd_core::net::ConvNet;
use pfd_core::tensor::Tensor;
use pfd_core::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfdStatus {
    PfdOk = 0,
    PfdNullArgument = 1,
    PfdInvalidArgument = 2,
    PfdIoError = 3,
    PfdFormatError = 4,
    PfdNumericError = 5,
    PfdInternalError = 6,
}

/// Opaque detector handle; create with `pfd_detector_load`, release with
/// `pfd_detector_free`.
pub struct PfdDetector {
    net: ConvNet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> PfdStatus {
    match err {
        Error::Io(_) => PfdStatus::PfdIoError,
        Error::Format(_) => PfdStatus::PfdFormatError,
        Error::Numeric(_) => PfdStatus::PfdNumericError,
        Error::Dimension(_) | Error::Config(_) => PfdStatus::PfdInvalidArgument,
        Error::Train(_) => PfdStatus::PfdInternalError,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pfd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last error observed on this thread (empty when none).
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pfd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads detector weights (the `PFNW` format written by the trainer).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
/// On success `*out` owns the detector and must be released with
/// `pfd_detector_free`.
#[no_mangle]
pub unsafe extern "C" fn pfd_detector_load(
    path: *const c_char,
    out: *mut *mut PfdDetector,
) -> PfdStatus {
    if path.is_null() || out.is_null() {
        set_error("null argument");
        return PfdStatus::PfdNullArgument;
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("path is not valid UTF-8");
            return PfdStatus::PfdInvalidArgument;
        }
    };
    match ConvNet::load(std::path::Path::new(path)) {
        Ok(net) => {
            if net.class_count != 2 {
                set_error("weights file is not a binary detector (class count != 2)");
                return PfdStatus::PfdInvalidArgument;
            }
            *out = Box::into_raw(Box::new(PfdDetector { net }));
            PfdStatus::PfdOk
        }
        Err(e) => {
            set_error(&e.to_string());
            *out = std::ptr::null_mut();
            status_of(&e)
        }
    }
}

/// Releases a detector handle; a null handle is a no-op.
///
/// # Safety
/// `det` must be null or a pointer returned by `pfd_detector_load` that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn pfd_detector_free(det: *mut PfdDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Expected input layout (channels, height, width) of the detector.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pfd_detector_input_shape(
    det: *const PfdDetector,
    channels: *mut u32,
    height: *mut u32,
    width: *mut u32,
) -> PfdStatus {
    if det.is_null() || channels.is_null() || height.is_null() || width.is_null() {
        set_error("null argument");
        return PfdStatus::PfdNullArgument;
    }
    let [c, h, w] = (*det).net.input_shape();
    *channels = c as u32;
    *height = h as u32;
    *width = w as u32;
    PfdStatus::PfdOk
}

fn score_one(net: &ConvNet, pixels: &[f32]) -> Result<f32, Error> {
    let [c, h, w] = net.input_shape();
    let x = Tensor::from_vec(&[c, h, w], pixels.to_vec())?;
    Ok(net.softmax_probs(&x)?[1])
}

/// Scores one image: writes the adversarial (class-1) probability to `score`.
/// `pixels` is row-major channels x height x width in [0,1]; `len` must equal
/// the product of the input shape.
///
/// # Safety
/// `pixels` must point to `len` readable floats and `score` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pfd_detector_score(
    det: *const PfdDetector,
    pixels: *const f32,
    len: usize,
    score: *mut f32,
) -> PfdStatus {
    if det.is_null() || pixels.is_null() || score.is_null() {
        set_error("null argument");
        return PfdStatus::PfdNullArgument;
    }
    let net = &(*det).net;
    let [c, h, w] = net.input_shape();
    if len != c * h * w {
        set_error("pixel buffer length does not match the detector input shape");
        return PfdStatus::PfdInvalidArgument;
    }
    let slice = std::slice::from_raw_parts(pixels, len);
    match score_one(net, slice) {
        Ok(s) => {
            *score = s;
            PfdStatus::PfdOk
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Scores `count` images stored back to back (each of the input-shape size);
/// writes one probability per image into `scores`.
///
/// # Safety
/// `pixels` must hold `count * input_size` floats and `scores` must have room
/// for `count` floats.
#[no_mangle]
pub unsafe extern "C" fn pfd_detector_score_batch(
    det: *const PfdDetector,
    pixels: *const f32,
    count: usize,
    scores: *mut f32,
) -> PfdStatus {
    if det.is_null() || pixels.is_null() || scores.is_null() {
        set_error("null argument");
        return PfdStatus::PfdNullArgument;
    }
    let net = &(*det).net;
    let [c, h, w] = net.input_shape();
    let stride = c * h * w;
    let all = std::slice::from_raw_parts(pixels, count * stride);
    let out = std::slice::from_raw_parts_mut(scores, count);
    for (i, chunk) in all.chunks_exact(stride).enumerate() {
        match score_one(net, chunk) {
            Ok(s) => out[i] = s,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        }
    }
    PfdStatus::PfdOk
}
