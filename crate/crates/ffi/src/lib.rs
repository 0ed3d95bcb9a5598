//! C ABI over the cystonet toolkit.
//!
//! Every function returns a [`CnStatus`]; on failure the message is available
//! from [`cn_last_error`] on the same thread. Handles are opaque and must be
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cystonet::dataio::{preprocess, resize_bilinear, BinaryMask, ImageRecord};
use cystonet::metrics::{permutation_test, roc_auc, seg_metrics};
use cystonet::nn::{Checkpoint, Model, Task};
use cystonet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Shape = 6,
    Image = 7,
    Tensor = 8,
    Undefined = 9,
    Config = 10,
    BufferTooSmall = 11,
    Panic = 12,
    Internal = 13,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnTask {
    Classify = 0,
    Segment = 1,
    Subtype = 2,
}

/// Opaque model handle.
pub struct CnModel {
    model: Model,
    version: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> CnStatus {
    match e {
        Error::Io { .. } => CnStatus::Io,
        Error::Parse { .. } | Error::Json(_) => CnStatus::Parse,
        Error::Validation(_) => CnStatus::Validation,
        Error::InvalidArgument(_) => CnStatus::InvalidArgument,
        Error::Shape(_) => CnStatus::Shape,
        Error::Image(_) => CnStatus::Image,
        Error::Tensor(_) => CnStatus::Tensor,
        Error::Undefined(_) => CnStatus::Undefined,
        Error::Config(_) => CnStatus::Config,
        _ => CnStatus::Internal,
    }
}

struct Fail(CnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CnStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            CnStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn cn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn cn_version() -> *const c_char {
    static V: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    V.as_ptr()
}

/// Loads a checkpoint directory or exported file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn cn_model_open(path: *const c_char, out_model: *mut *mut CnModel) -> CnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let slot = out(out_model, "out_model")?;
        *slot = ptr::null_mut();
        let p = CStr::from_ptr(path).to_str().map_err(|_| Fail(CnStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = Checkpoint::open(p)?;
        let model = ck.to_model()?;
        let version = CString::new(ck.version.replace('\0', " ")).expect("no interior nul");
        *slot = Box::into_raw(Box::new(CnModel { model, version }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`cn_model_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cn_model_free(model: *mut CnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out_task` writable.
#[no_mangle]
pub unsafe extern "C" fn cn_model_task(model: *const CnModel, out_task: *mut CnTask) -> CnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out(out_task, "out_task")? = match m.model.task() {
            Task::Classify => CnTask::Classify,
            Task::Segment => CnTask::Segment,
            Task::Subtype => CnTask::Subtype,
        };
        Ok(())
    })
}

/// Version string of the loaded weights, owned by the handle.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cn_model_version(model: *const CnModel) -> *const c_char {
    model.as_ref().map_or(ptr::null(), |m| m.version.as_ptr())
}

/// Number of floats [`cn_model_predict_rgb`] writes for a `width`x`height`
/// input: 1 (classify), 3 (subtype) or `width * height` (segment).
///
/// # Safety
/// `model` must be a live handle; `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn cn_model_output_len(model: *const CnModel, width: u32, height: u32, out_len: *mut usize) -> CnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out(out_len, "out_len")? = match m.model.task() {
            Task::Classify => 1,
            Task::Subtype => 3,
            Task::Segment => width as usize * height as usize,
        };
        Ok(())
    })
}

/// Runs the model on interleaved 8-bit RGB pixels and writes sigmoid
/// probabilities; segmentation maps come back at the input resolution.
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes and `probs` `probs_len` floats.
#[no_mangle]
pub unsafe extern "C" fn cn_model_predict_rgb(
    model: *const CnModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    probs: *mut f32,
    probs_len: usize,
) -> CnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let px = slice(rgb, width as usize * height as usize * 3, "rgb")?;
        let rec = ImageRecord::from_raw("ffi", "ffi", width, height, 3, px.to_vec())?;
        let side = m.model.config.input_side;
        let img = preprocess(&rec, side)?;
        let x = candle_core_tensor(&img.data, side)?;
        let p = m.model.predict(&x)?;
        let p: Vec<f32> = p.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(Error::from)?;
        let values = match m.model.task() {
            Task::Segment => resize_bilinear(&p, 1, side, side, height as usize, width as usize),
            _ => p,
        };
        if probs_len < values.len() {
            return Err(Fail(CnStatus::BufferTooSmall, format!("need {} floats, got {probs_len}", values.len())));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        std::slice::from_raw_parts_mut(probs, values.len()).copy_from_slice(&values);
        Ok(())
    })
}

fn candle_core_tensor(data: &[f32], side: usize) -> Result<cystonet::Tensor, Fail> {
    cystonet::Tensor::from_vec(data.to_vec(), (1, 3, side, side), &cystonet::Device::Cpu).map_err(|e| Fail::from(Error::from(e)))
}

/// Rank-based ROC AUC; labels are 0/1 bytes.
///
/// # Safety
/// `scores` and `labels` must each hold `n` elements; `out_auc` writable.
#[no_mangle]
pub unsafe extern "C" fn cn_roc_auc(scores: *const f64, labels: *const u8, n: usize, out_auc: *mut f64) -> CnStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        *out(out_auc, "out_auc")? = roc_auc(s, &l)?;
        Ok(())
    })
}

/// Dice and IoU of two row-major 0/1 masks.
///
/// # Safety
/// `pred` and `truth` must hold `height * width` bytes; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn cn_dice_iou(
    pred: *const u8,
    truth: *const u8,
    height: usize,
    width: usize,
    out_dice: *mut f64,
    out_iou: *mut f64,
) -> CnStatus {
    guard(|| {
        let n = height * width;
        let mk = |d: &[u8]| BinaryMask::from_vec(height, width, d.iter().map(|&v| v != 0).collect());
        let p = mk(slice(pred, n, "pred")?)?;
        let t = mk(slice(truth, n, "truth")?)?;
        let r = seg_metrics(&p, &t)?;
        *out(out_dice, "out_dice")? = r.dice;
        *out(out_iou, "out_iou")? = r.iou;
        Ok(())
    })
}

/// Label-permutation test of the AUC with `n_perms` seeded shuffles.
///
/// # Safety
/// `scores` and `labels` must each hold `n` elements; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn cn_permutation_test(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    n_perms: usize,
    seed: u64,
    out_observed: *mut f64,
    out_p_value: *mut f64,
) -> CnStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        let r = permutation_test(s, &l, n_perms, seed)?;
        *out(out_observed, "out_observed")? = r.observed;
        *out(out_p_value, "out_p_value")? = r.p_value;
        Ok(())
    })
}
