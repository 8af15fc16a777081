//! C ABI over the saliency library.
//!
//! Every fallible function returns a [`SelfsalStatus`]. On failure a
//! description is kept per thread and can be read with
//! [`selfsal_last_error`]. Panics never cross the boundary; they surface as
//! [`SelfsalStatus::Panic`].
//!
//! Images are passed as interleaved 8-bit RGB, row-major, `3 * height *
//! width` bytes. Maps are row-major `height * width` doubles in `[0,1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use selfsal::checkpoint::Checkpoint;
use selfsal::config::TrainConfig;
use selfsal::imaging::{Image, SaliencyMap};
use selfsal::metrics;
use selfsal::model::{predict_saliency, ModelState};
use selfsal::pseudogt::{generate_pseudo_gt, EdgeProvider};
use selfsal::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelfsalStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument value, configuration, or UTF-8.
    InvalidArgument = 2,
    /// Buffer sizes or map dimensions disagree.
    Shape = 3,
    /// File could not be read or decoded.
    Io = 4,
    /// Checkpoint contents are malformed.
    Format = 5,
    /// Non-finite or out-of-range numbers.
    Numeric = 6,
    Panic = 7,
}

/// Opaque network handle with the configuration used for pseudo labels.
pub struct SelfsalModel {
    state: ModelState,
    config: TrainConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SelfsalStatus {
    match e {
        Error::Config(_) | Error::UnknownKey(_) | Error::Dataset(_) => {
            SelfsalStatus::InvalidArgument
        }
        Error::Shape(_) => SelfsalStatus::Shape,
        Error::NonFinite(_) | Error::DegenerateLogits(_) | Error::Diverged { .. } => {
            SelfsalStatus::Numeric
        }
        Error::Io { .. } | Error::Image { .. } => SelfsalStatus::Io,
        Error::Format(_) => SelfsalStatus::Format,
    }
}

struct Failure(SelfsalStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: SelfsalStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, records any error or panic, and returns its status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SelfsalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            SelfsalStatus::Ok
        }
        Ok(Err(Failure(s, m))) => {
            set_last_error(&m);
            s
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {m}"));
            SelfsalStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(SelfsalStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn utf8<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p).to_str().map_err(|_| {
        fail(
            SelfsalStatus::InvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })
}

fn pixels(height: u32, width: u32) -> Result<usize, Failure> {
    if height == 0 || width == 0 {
        return Err(fail(
            SelfsalStatus::Shape,
            "image dimensions must be positive",
        ));
    }
    (height as usize)
        .checked_mul(width as usize)
        .ok_or_else(|| fail(SelfsalStatus::Shape, "image too large"))
}

unsafe fn read_image(rgb: *const u8, height: u32, width: u32) -> Result<Image, Failure> {
    non_null(rgb, "rgb")?;
    let n = pixels(height, width)?;
    let bytes = slice::from_raw_parts(rgb, 3 * n);
    Ok(Image::from_rgb8(height as usize, width as usize, bytes)?)
}

unsafe fn read_map(
    p: *const f64,
    height: u32,
    width: u32,
    what: &str,
) -> Result<SaliencyMap, Failure> {
    non_null(p, what)?;
    let n = pixels(height, width)?;
    Ok(SaliencyMap::new(
        height as usize,
        width as usize,
        slice::from_raw_parts(p, n).to_vec(),
    )?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn selfsal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn selfsal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. Training checkpoints yield their student network and
/// the configuration they were trained with.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn selfsal_model_load(
    path: *const c_char,
    out: *mut *mut SelfsalModel,
) -> SelfsalStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = utf8(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let state = ckpt.inference_state()?;
        let mut config = match ckpt.meta.get("config") {
            Some(text) => TrainConfig::parse(text)?,
            None => TrainConfig::default(),
        };
        config.classes = state.arch.classes;
        *out = Box::into_raw(Box::new(SelfsalModel { state, config }));
        Ok(())
    })
}

/// Freshly initialised network for the default configuration with the
/// given class count and seed.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn selfsal_model_init(
    classes: u32,
    seed: u64,
    out: *mut *mut SelfsalModel,
) -> SelfsalStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = TrainConfig {
            classes: classes as usize,
            seed,
            ..TrainConfig::default()
        };
        config.validate()?;
        let state = ModelState::init(config.arch(), seed)?;
        *out = Box::into_raw(Box::new(SelfsalModel { state, config }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn selfsal_model_free(model: *mut SelfsalModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Applies one `key=value` configuration override to the handle.
///
/// # Safety
/// `model` must be a live handle and `assignment` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn selfsal_model_configure(
    model: *mut SelfsalModel,
    assignment: *const c_char,
) -> SelfsalStatus {
    guard(|| {
        non_null(model, "model")?;
        let a = utf8(assignment, "assignment")?;
        let m = &mut *model;
        let mut next = m.config.clone();
        next.apply_override(a)?;
        next.validate()?;
        if next.arch() != m.state.arch {
            return Err(fail(
                SelfsalStatus::InvalidArgument,
                format!("{a} changes the network architecture"),
            ));
        }
        m.config = next;
        Ok(())
    })
}

/// Predicted saliency map, written to `out` (`height * width` doubles).
///
/// # Safety
/// `rgb` must hold `3 * height * width` bytes and `out` `height * width`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn selfsal_infer(
    model: *const SelfsalModel,
    rgb: *const u8,
    height: u32,
    width: u32,
    out: *mut f64,
) -> SelfsalStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let x = read_image(rgb, height, width)?;
        let s = predict_saliency(&x, &(*model).state)?;
        slice::from_raw_parts_mut(out, s.values().len()).copy_from_slice(s.values());
        Ok(())
    })
}

/// Pseudo label of an image with Sobel edges. The soft label goes to
/// `soft_out`; the binary one to `hard_out` as 0/1 bytes when it is not
/// null.
///
/// # Safety
/// `rgb` must hold `3 * height * width` bytes, `soft_out` `height * width`
/// doubles and `hard_out`, if not null, `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn selfsal_pseudo_gt(
    model: *const SelfsalModel,
    rgb: *const u8,
    height: u32,
    width: u32,
    soft_out: *mut f64,
    hard_out: *mut u8,
) -> SelfsalStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(soft_out, "soft_out")?;
        let x = read_image(rgb, height, width)?;
        let m = &*model;
        let art = generate_pseudo_gt(&x, "", &m.state, &EdgeProvider::Sobel, &m.config)?;
        let n = art.pseudo.soft.values().len();
        slice::from_raw_parts_mut(soft_out, n).copy_from_slice(art.pseudo.soft.values());
        if !hard_out.is_null() {
            for (o, v) in slice::from_raw_parts_mut(hard_out, n)
                .iter_mut()
                .zip(art.pseudo.hard.values())
            {
                *o = *v as u8;
            }
        }
        Ok(())
    })
}

/// Mean absolute error of two maps of `len` values.
///
/// # Safety
/// `pred` and `gt` must hold `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn selfsal_mae(
    pred: *const f64,
    gt: *const f64,
    len: usize,
    out: *mut f64,
) -> SelfsalStatus {
    guard(|| {
        non_null(out, "out")?;
        if len == 0 || len > u32::MAX as usize {
            return Err(fail(SelfsalStatus::Shape, "len must be in 1..=u32::MAX"));
        }
        let p = read_map(pred, 1, len as u32, "pred")?;
        let g = read_map(gt, 1, len as u32, "gt")?;
        *out = metrics::mae(&p, &g)?;
        Ok(())
    })
}

/// F-measure of `pred` against the binary mask `gt` (values `>= 0.5` are
/// foreground), averaged over the 256 thresholds.
///
/// # Safety
/// `pred` and `gt` must hold `height * width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn selfsal_f_beta(
    pred: *const f64,
    gt: *const f64,
    height: u32,
    width: u32,
    beta2: f64,
    out: *mut f64,
) -> SelfsalStatus {
    guard(|| {
        non_null(out, "out")?;
        if !(beta2 > 0.0 && beta2.is_finite()) {
            return Err(fail(
                SelfsalStatus::InvalidArgument,
                "beta2 must be positive",
            ));
        }
        let p = read_map(pred, height, width, "pred")?;
        let g = read_map(gt, height, width, "gt")?;
        *out = metrics::f_beta(&p, &g, beta2)?;
        Ok(())
    })
}
