//! C ABI over the `ccl` library: load a trained checkpoint, score RGB
//! images, and compute the evaluation metrics on caller-owned buffers.
//!
//! Every function returns a [`CclStatus`]. On failure, a description is
//! available from [`ccl_last_error_message`] on the same thread. Panics never
//! cross the boundary; they are reported as [`CclStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use candle_core::Device;
use ccl::image::{Image, Mask};
use ccl::metrics::{aupro, auroc, v_measure};
use ccl::model::{load_checkpoint, Backbone};
use ccl::scoring::{score_images, ScoreMap};
use ccl::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Shape = 4,
    Internal = 5,
    Panic = 6,
}

/// A loaded model. Create with [`ccl_model_load`], release with
/// [`ccl_model_free`].
pub struct CclModel {
    model: Backbone,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CclStatus {
    match e {
        Error::Io { .. } | Error::ImageRead { .. } | Error::ImageWrite { .. } => CclStatus::Io,
        Error::MalformedDataset { .. } | Error::Checkpoint { .. } | Error::ConfigMismatch { .. } => {
            CclStatus::Io
        }
        Error::ShapeMismatch(_) => CclStatus::Shape,
        Error::InvalidArgument(_) | Error::EmptyClass(_) | Error::EmptyPositives(_) => {
            CclStatus::InvalidArgument
        }
        _ => CclStatus::Internal,
    }
}

struct Failure(CclStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(CclStatus::NullPointer, format!("{name} is NULL"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CclStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CclStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CclStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
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
            CclStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be NULL or valid for `len` reads.
unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

/// # Safety
/// `p` must be NULL or valid for one write.
unsafe fn write<T>(p: *mut T, v: T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    unsafe { p.write(v) };
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ccl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ccl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads `checkpoint.bin` (or a run directory containing it).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccl_model_load(path: *const c_char, out: *mut *mut CclModel) -> CclStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let mut file = Path::new(path).to_path_buf();
        if file.is_dir() {
            file = file.join(ccl::train::CHECKPOINT_FILE);
        }
        let (model, _) = load_checkpoint(&file, &Device::Cpu)?;
        let handle = Box::into_raw(Box::new(CclModel { model }));
        unsafe { out.write(handle) };
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must come from [`ccl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ccl_model_free(model: *mut CclModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(unsafe { Box::from_raw(model) })));
    }
}

/// Side length of the square anomaly maps this model produces.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccl_model_resolution(model: *const CclModel, out: *mut usize) -> CclStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        unsafe { write(out, m.model.config().resolution, "out") }
    })
}

/// Scores one interleaved 8-bit RGB image of `width`×`height` pixels. The
/// image is resized to the model resolution `r`; `out_map` receives `r*r`
/// row-major scores and `out_score` the image score. `sigma` is the
/// Gaussian smoothing width in pixels.
///
/// # Safety
/// `rgb` must hold `width*height*3` bytes, `out_map` room for `r*r`
/// doubles, `out_score` one double.
#[no_mangle]
pub unsafe extern "C" fn ccl_model_score(
    model: *const CclModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    sigma: f64,
    out_map: *mut f64,
    out_score: *mut f64,
) -> CclStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let len = width.checked_mul(height).and_then(|p| p.checked_mul(3)).ok_or_else(|| invalid("image too large"))?;
        let data = unsafe { input(rgb, len, "rgb") }?;
        if out_map.is_null() {
            return Err(null("out_map"));
        }
        if out_score.is_null() {
            return Err(null("out_score"));
        }
        let r = m.model.config().resolution;
        let image = Image::from_raw_rgb8(width, height, data, r)?;
        let scored = score_images(&m.model, &[&image], 1, sigma)?;
        let a = &scored[0];
        unsafe {
            slice::from_raw_parts_mut(out_map, r * r).copy_from_slice(a.map.data());
            out_score.write(a.image_score);
        }
        Ok(())
    })
}

/// Image-level AUROC of `n` scores against 0/1 labels.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccl_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> CclStatus {
    guard(|| {
        let s = unsafe { input(scores, n, "scores") }?;
        let l: Vec<bool> = unsafe { input(labels, n, "labels") }?.iter().map(|&v| v != 0).collect();
        let v = auroc(s, &l)?;
        unsafe { write(out, v, "out") }
    })
}

/// AUPRO up to `fpr_limit` over `count` maps of `height`×`width` scores with
/// matching 0/1 masks, using `thresholds` evenly spaced thresholds.
///
/// # Safety
/// `maps` and `masks` must each hold `count*height*width` elements.
#[no_mangle]
pub unsafe extern "C" fn ccl_aupro(
    maps: *const f64,
    masks: *const u8,
    count: usize,
    height: usize,
    width: usize,
    fpr_limit: f64,
    thresholds: usize,
    out: *mut f64,
) -> CclStatus {
    guard(|| {
        let per = height.checked_mul(width).ok_or_else(|| invalid("map too large"))?;
        let total = per.checked_mul(count).ok_or_else(|| invalid("too many maps"))?;
        let s = unsafe { input(maps, total, "maps") }?;
        let k = unsafe { input(masks, total, "masks") }?;
        let mut score_maps = Vec::with_capacity(count);
        let mut mask_list = Vec::with_capacity(count);
        for i in 0..count {
            let range = i * per..(i + 1) * per;
            score_maps.push(ScoreMap::new(height, width, s[range.clone()].to_vec())?);
            mask_list.push(Mask::from_vec(height, width, k[range].iter().map(|&v| u8::from(v != 0)).collect())?);
        }
        let v = aupro(&score_maps, &mask_list, fpr_limit, thresholds)?;
        unsafe { write(out, v, "out") }
    })
}

/// V-measure of `n` predicted cluster ids against true class ids.
///
/// # Safety
/// `predicted` and `truth` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccl_v_measure(
    predicted: *const usize,
    truth: *const usize,
    n: usize,
    out: *mut f64,
) -> CclStatus {
    guard(|| {
        let p = unsafe { input(predicted, n, "predicted") }?;
        let t = unsafe { input(truth, n, "truth") }?;
        let v = v_measure(p, t)?;
        unsafe { write(out, v, "out") }
    })
}
