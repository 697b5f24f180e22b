//! C ABI over `grle`: load a checkpoint, embed text, compare embeddings.
//!
//! Every fallible call returns a [`GrleStatus`]. On failure a description is
//! kept per thread and can be read with [`grle_last_error_message`].
//! Handles are opaque; free them with [`grle_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use grle::model::Model;
use grle::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrleStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    InvalidArgument = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// A loaded model. Only ever handled through pointers.
pub struct GrleModel {
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: GrleStatus, msg: impl Into<String>) -> GrleStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> GrleStatus {
    match e {
        Error::Io { .. } => GrleStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) | Error::Config { .. } => GrleStatus::Checkpoint,
        Error::InvalidArgument(_) | Error::SequenceTooLong { .. } | Error::TokenOutOfRange { .. } => {
            GrleStatus::InvalidArgument
        }
        _ => GrleStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> GrleStatus) -> GrleStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == GrleStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(GrleStatus::Internal, "panic inside grle"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, GrleStatus> {
    if p.is_null() {
        return Err(fail(GrleStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GrleStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Loads the checkpoint directory `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn grle_model_load(path: *const c_char, out: *mut *mut GrleModel) -> GrleStatus {
    guard(|| {
        if out.is_null() {
            return fail(GrleStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Model::<f32>::load(Path::new(path)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(GrleModel { model }));
                GrleStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`grle_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn grle_model_free(model: *mut GrleModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width of `model`, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn grle_model_dim(model: *const GrleModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().d_model)
}

/// Embeds one text into `out`, which holds `out_len` floats. The first
/// [`grle_model_dim`] entries are written.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated and `out` valid for
/// `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn grle_model_encode(
    model: *const GrleModel,
    text: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> GrleStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(GrleStatus::NullPointer, "model is null");
        };
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(GrleStatus::NullPointer, "out is null");
        }
        let d = m.model.config().d_model;
        if out_len < d {
            return fail(GrleStatus::BufferTooSmall, format!("need {d} floats, got {out_len}"));
        }
        match m.model.encode_texts(&[text], 1) {
            Ok(mut e) => {
                let v = e.pop().unwrap_or_default();
                std::slice::from_raw_parts_mut(out, d).copy_from_slice(&v);
                GrleStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Cosine similarity of two `len`-float vectors, written to `*out`.
///
/// # Safety
/// `a` and `b` must be valid for `len` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn grle_cosine(a: *const f32, b: *const f32, len: usize, out: *mut f32) -> GrleStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(GrleStatus::NullPointer, "null vector or output");
        }
        if len == 0 {
            return fail(GrleStatus::InvalidArgument, "vectors are empty");
        }
        let (a, b) = (std::slice::from_raw_parts(a, len), std::slice::from_raw_parts(b, len));
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            dot += x as f64 * y as f64;
            na += x as f64 * x as f64;
            nb += y as f64 * y as f64;
        }
        if na == 0.0 || nb == 0.0 {
            return fail(GrleStatus::InvalidArgument, "zero vector");
        }
        *out = (dot / (na.sqrt() * nb.sqrt())) as f32;
        GrleStatus::Ok
    })
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn grle_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}
