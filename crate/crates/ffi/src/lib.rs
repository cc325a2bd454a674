//! C ABI over `scd-core`: checkpoint loading, single-pair prediction and
//! streaming metric accumulation.
//!
//! Every fallible call returns an [`ScdStatus`]; the message of the last
//! failure on the calling thread is available through
//! [`scd_last_error_message`]. Handles are opaque and must be released with
//! their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use scd_core::metrics::{compute_scores, ConfusionMatrix};
use scd_core::model::ScdNet;
use scd_core::render::predict_pair;
use scd_core::train::load_checkpoint;
use scd_core::{ParamStore, ScdError, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    ClassOutOfRange = 4,
    NonFinite = 5,
    Dataset = 6,
    Checkpoint = 7,
    Config = 8,
    Io = 9,
    Panic = 10,
}

impl From<&ScdError> for ScdStatus {
    fn from(e: &ScdError) -> Self {
        match e {
            ScdError::Shape(_) => ScdStatus::Shape,
            ScdError::InvalidArgument(_) => ScdStatus::InvalidArgument,
            ScdError::ClassOutOfRange { .. } => ScdStatus::ClassOutOfRange,
            ScdError::NonFiniteLoss { .. } => ScdStatus::NonFinite,
            ScdError::Dataset(_) | ScdError::MissingPairMember { .. } => ScdStatus::Dataset,
            ScdError::Checkpoint(_) | ScdError::Json(_) => ScdStatus::Checkpoint,
            ScdError::Config(_) => ScdStatus::Config,
            ScdError::Png(_) | ScdError::Io(_) => ScdStatus::Io,
        }
    }
}

/// Scores of a confusion matrix.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScdScores {
    pub oa: f64,
    pub miou: f64,
    pub sek: f64,
    pub f1: f64,
}

/// Trained network with its parameters.
pub struct ScdModel {
    net: ScdNet,
    store: ParamStore<f32>,
}

/// Streaming confusion matrix.
pub struct ScdConfusion {
    inner: ConfusionMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), (ScdStatus, String)>) -> ScdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside scd".into());
            ScdStatus::Panic
        }
    }
}

fn core<T>(r: scd_core::Result<T>) -> Result<T, (ScdStatus, String)> {
    r.map_err(|e| (ScdStatus::from(&e), e.to_string()))
}

fn null(what: &str) -> (ScdStatus, String) {
    (ScdStatus::NullPointer, format!("{what} is null"))
}

/// Copy the last error message into `buf` (NUL-terminated, truncated to
/// `len`). Returns the full message length, or 0 when there is none.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn scd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint written by the training command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scd_model_load(path: *const c_char, out: *mut *mut ScdModel) -> ScdStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| (ScdStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (net, store, _) = core(load_checkpoint(Path::new(path)))?;
        *out = Box::into_raw(Box::new(ScdModel { net, store }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`scd_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scd_model_free(model: *mut ScdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of semantic classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scd_model_classes(model: *const ScdModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.config.classes)
}

/// Predict one pair. Images are planar `[3][height][width]` floats in
/// `[0, 1]`; each output holds `height * width` values. `sem1`/`sem2` get
/// class indices (0 where no change), `change_prob` the change probability.
///
/// # Safety
/// Inputs must be valid for `3 * height * width` floats and outputs for
/// `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn scd_model_predict(
    model: *const ScdModel,
    image_t1: *const f32,
    image_t2: *const f32,
    height: usize,
    width: usize,
    sem1: *mut u8,
    sem2: *mut u8,
    change_prob: *mut f32,
) -> ScdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if image_t1.is_null() || image_t2.is_null() || sem1.is_null() || sem2.is_null() || change_prob.is_null() {
            return Err(null("buffer"));
        }
        let hw = height.checked_mul(width).ok_or((ScdStatus::InvalidArgument, "size overflow".to_string()))?;
        let image = |p: *const f32| core(Tensor::new(&[3, height, width], std::slice::from_raw_parts(p, 3 * hw).to_vec()));
        let maps = core(predict_pair(&m.net, &m.store, &image(image_t1)?, &image(image_t2)?))?;
        ptr::copy_nonoverlapping(maps.sem1.data().as_ptr(), sem1, hw);
        ptr::copy_nonoverlapping(maps.sem2.data().as_ptr(), sem2, hw);
        ptr::copy_nonoverlapping(maps.change_prob.as_ptr(), change_prob, hw);
        Ok(())
    })
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scd_confusion_new(classes: usize, out: *mut *mut ScdConfusion) -> ScdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(2..=256).contains(&classes) {
            return Err((ScdStatus::InvalidArgument, format!("classes must be in 2..=256, got {classes}")));
        }
        *out = Box::into_raw(Box::new(ScdConfusion { inner: ConfusionMatrix::new(classes) }));
        Ok(())
    })
}

/// # Safety
/// `cm` must come from [`scd_confusion_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scd_confusion_free(cm: *mut ScdConfusion) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}

/// Count `len` (prediction, ground truth) pixel pairs.
///
/// # Safety
/// `pred` and `gt` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn scd_confusion_update(cm: *mut ScdConfusion, pred: *const u8, gt: *const u8, len: usize) -> ScdStatus {
    guard(|| {
        let cm = cm.as_mut().ok_or_else(|| null("confusion"))?;
        if len == 0 {
            return Ok(());
        }
        if pred.is_null() || gt.is_null() {
            return Err(null("buffer"));
        }
        core(cm.inner.update(std::slice::from_raw_parts(pred, len), std::slice::from_raw_parts(gt, len)))
    })
}

/// # Safety
/// `cm` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scd_confusion_scores(cm: *const ScdConfusion, out: *mut ScdScores) -> ScdStatus {
    guard(|| {
        let cm = cm.as_ref().ok_or_else(|| null("confusion"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = core(compute_scores(&cm.inner))?;
        *out = ScdScores { oa: s.oa, miou: s.miou, sek: s.sek, f1: s.f1 };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(ScdStatus::from(&ScdError::Shape("x".into())), ScdStatus::Shape);
        assert_eq!(ScdStatus::from(&ScdError::ClassOutOfRange { index: 9, classes: 5 }), ScdStatus::ClassOutOfRange);
        assert_eq!(ScdStatus::Ok as i32, 0);
    }

    #[test]
    fn error_message_truncates() {
        set_error("abcdef".into());
        let mut buf = [1 as c_char; 4];
        let n = unsafe { scd_last_error_message(buf.as_mut_ptr(), buf.len()) };
        assert_eq!(n, 6);
        let s = unsafe { CStr::from_ptr(buf.as_ptr()) };
        assert_eq!(s.to_str().unwrap(), "abc");
    }
}
