//! C ABI over the speakerkws streaming detector.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns a [`KwsStatus`];
//! on failure [`kws_last_error_message`] describes the error.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use speakerkws::model::{KwsModel, StreamSession};
use speakerkws::speaker::constant_vector;
use speakerkws::KwsError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KwsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptFile = 4,
    DimensionMismatch = 5,
    Runtime = 6,
    Panic = 7,
}

/// Loaded detector model.
pub struct KwsModelHandle {
    model: Arc<KwsModel>,
}

/// Streaming session bound to one model and one speaker embedding.
pub struct KwsStreamHandle {
    model: Arc<KwsModel>,
    session: StreamSession,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &KwsError) -> KwsStatus {
    match err {
        KwsError::Io { .. } => KwsStatus::Io,
        KwsError::Corrupt { .. } | KwsError::VersionMismatch { .. } | KwsError::ShapeMismatch { .. } | KwsError::Json(_) => {
            KwsStatus::CorruptFile
        }
        KwsError::Dimension { .. } => KwsStatus::DimensionMismatch,
        KwsError::Validation(_) | KwsError::Usage(_) | KwsError::Config(_) | KwsError::ConfigMismatch(_) => {
            KwsStatus::InvalidArgument
        }
        _ => KwsStatus::Runtime,
    }
}

fn fail(status: KwsStatus, msg: &str) -> KwsStatus {
    set_error(msg);
    status
}

/// Runs `f`, recording errors and converting panics into [`KwsStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), (KwsStatus, String)>) -> KwsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            KwsStatus::Ok
        }
        Ok(Err((status, msg))) => fail(status, &msg),
        Err(_) => fail(KwsStatus::Panic, "internal panic"),
    }
}

fn kws(err: KwsError) -> (KwsStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(name: &str) -> (KwsStatus, String) {
    (KwsStatus::NullPointer, format!("`{name}` is null"))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn kws_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kws_model_load(path: *const c_char, out: *mut *mut KwsModelHandle) -> KwsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (KwsStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = KwsModel::load(Path::new(path)).map_err(kws)?;
        *out = Box::into_raw(Box::new(KwsModelHandle { model: Arc::new(model) }));
        Ok(())
    })
}

/// Releases a model. Streams created from it stay usable.
///
/// # Safety
/// `model` must come from [`kws_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn kws_model_free(model: *mut KwsModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Features per input frame, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kws_model_input_dim(model: *const KwsModelHandle) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().input_dim)
}

/// Speaker embedding width, or 0 for unconditioned models and null handles.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kws_model_embedding_dim(model: *const KwsModelHandle) -> usize {
    model.as_ref().and_then(|m| m.model.embedding_dim()).unwrap_or(0)
}

/// Posterior classes per frame, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kws_model_num_classes(model: *const KwsModelHandle) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().num_classes)
}

/// Opens a streaming session. `embedding` may be null, in which case a
/// conditioned model uses the all-zero constant vector; otherwise it must
/// hold exactly `embedding_len` values.
///
/// # Safety
/// `model` must be a live handle, `embedding` null or readable for
/// `embedding_len` doubles, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kws_stream_new(
    model: *const KwsModelHandle,
    embedding: *const f64,
    embedding_len: usize,
    out: *mut *mut KwsStreamHandle,
) -> KwsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let values: Option<Vec<f64>> = match (m.model.embedding_dim(), embedding.is_null()) {
            (None, _) => None,
            (Some(dim), true) => Some(constant_vector(dim).map_err(kws)?.values),
            (Some(_), false) => Some(std::slice::from_raw_parts(embedding, embedding_len).to_vec()),
        };
        let session = m.model.new_session(values.as_deref()).map_err(kws)?;
        *out = Box::into_raw(Box::new(KwsStreamHandle {
            model: Arc::clone(&m.model),
            session,
        }));
        Ok(())
    })
}

/// Pushes one frame of `frame_len` features and writes the frame's class
/// posteriors into `posteriors` (capacity `posteriors_len`).
///
/// # Safety
/// `stream` must be a live handle, `frame` readable for `frame_len`
/// doubles and `posteriors` writable for `posteriors_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn kws_stream_push(
    stream: *mut KwsStreamHandle,
    frame: *const f64,
    frame_len: usize,
    posteriors: *mut f64,
    posteriors_len: usize,
) -> KwsStatus {
    guard(|| {
        let s = stream.as_mut().ok_or_else(|| null("stream"))?;
        if frame.is_null() {
            return Err(null("frame"));
        }
        if posteriors.is_null() {
            return Err(null("posteriors"));
        }
        let classes = s.model.config().num_classes;
        if posteriors_len < classes {
            return Err((
                KwsStatus::DimensionMismatch,
                format!("posterior buffer holds {posteriors_len}, need {classes}"),
            ));
        }
        let frame = std::slice::from_raw_parts(frame, frame_len);
        let p = s.model.stream_step(&mut s.session, frame).map_err(kws)?;
        ptr::copy_nonoverlapping(p.as_ptr(), posteriors, classes);
        Ok(())
    })
}

/// Clears the session history, keeping its embedding.
///
/// # Safety
/// `stream` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn kws_stream_reset(stream: *mut KwsStreamHandle) -> KwsStatus {
    guard(|| {
        let s = stream.as_mut().ok_or_else(|| null("stream"))?;
        s.session.reset();
        Ok(())
    })
}

/// Frames pushed since creation or the last reset; 0 for a null handle.
///
/// # Safety
/// `stream` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kws_stream_frames(stream: *const KwsStreamHandle) -> u64 {
    stream.as_ref().map_or(0, |s| s.session.frames())
}

/// # Safety
/// `stream` must come from [`kws_stream_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn kws_stream_free(stream: *mut KwsStreamHandle) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Equal error rate of two score lists; see the core library for the
/// threshold-sweep convention. `threshold` may be null.
///
/// # Safety
/// `positives`/`negatives` must be readable for their lengths; `eer` must be
/// writable and `threshold` null or writable.
#[no_mangle]
pub unsafe extern "C" fn kws_compute_eer(
    positives: *const f64,
    num_positives: usize,
    negatives: *const f64,
    num_negatives: usize,
    eer: *mut f64,
    threshold: *mut f64,
) -> KwsStatus {
    guard(|| {
        if positives.is_null() || negatives.is_null() {
            return Err(null("scores"));
        }
        if eer.is_null() {
            return Err(null("eer"));
        }
        let p = std::slice::from_raw_parts(positives, num_positives);
        let n = std::slice::from_raw_parts(negatives, num_negatives);
        let r = speakerkws::eval::compute_eer(p, n).map_err(kws)?;
        *eer = r.eer;
        if !threshold.is_null() {
            *threshold = r.threshold;
        }
        Ok(())
    })
}
