//! C interface to `fpan`.
//!
//! Models are opaque [`FpanModel`] handles created by `fpan_model_*` and
//! released with [`fpan_model_free`]. Every fallible function returns an
//! [`FpanStatus`]; on failure [`fpan_last_error`] describes the problem
//! (per thread, valid until the next call on that thread). Images are
//! tightly packed 8-bit RGB, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fpan::checkpoint::{load_checkpoint, save_checkpoint};
use fpan::imaging::{self_ensemble_sr, ImageU8, Upscaler};
use fpan::metrics::{psnr_y, ssim_y};
use fpan::model::{AblationPreset, Fpan, ModelConfig};
use fpan::FpanError;

/// Opaque model handle.
pub struct FpanModel {
    inner: Fpan<f32>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpanStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Runtime = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &FpanError) -> FpanStatus {
    match e {
        FpanError::Io { .. } | FpanError::Image { .. } => FpanStatus::Io,
        FpanError::Checkpoint { .. } => FpanStatus::Checkpoint,
        FpanError::Config(_) | FpanError::ConfigLine { .. } => FpanStatus::Config,
        FpanError::Usage(_) | FpanError::Dimension(_) => FpanStatus::InvalidArgument,
        FpanError::Data(_) | FpanError::NonFiniteLoss { .. } => FpanStatus::Runtime,
    }
}

/// Run `f`, recording its error or panic.
fn guard(f: impl FnOnce() -> Result<(), (FpanStatus, String)>) -> FpanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FpanStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FpanStatus::Panic
        }
    }
}

fn lift(e: FpanError) -> (FpanStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FpanStatus, String) {
    (FpanStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (FpanStatus, String) {
    (FpanStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg(p: *const c_char) -> Result<String, (FpanStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| invalid("path is not UTF-8"))
}

unsafe fn image_arg(data: *const u8, width: u32, height: u32, what: &str) -> Result<ImageU8, (FpanStatus, String)> {
    if data.is_null() {
        return Err(null(what));
    }
    let (w, h) = (width as usize, height as usize);
    if w == 0 || h == 0 {
        return Err(invalid(format!("{what}: empty image")));
    }
    let bytes = std::slice::from_raw_parts(data, w * h * 3);
    Ok(ImageU8 {
        width: w,
        height: h,
        data: bytes.to_vec(),
    })
}

unsafe fn emit(out: *mut *mut FpanModel, model: Fpan<f32>) -> Result<(), (FpanStatus, String)> {
    *out = Box::into_raw(Box::new(FpanModel { inner: model }));
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `fpan_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fpan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// New randomly initialized model: 64 channels, scales {1, 2, 4},
/// `preset` in 0..=4 selects the ablation P0..P4.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn fpan_model_new(
    scale: u32,
    blocks: u32,
    stage_depth: u32,
    preset: u32,
    seed: u64,
    out: *mut *mut FpanModel,
) -> FpanStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ablation = *AblationPreset::ALL
            .get(preset as usize)
            .ok_or_else(|| invalid(format!("preset {preset} not in 0..=4")))?;
        let config = ModelConfig {
            scale: scale as usize,
            num_blocks: blocks as usize,
            stage_depth: stage_depth as usize,
            ..ModelConfig::default()
        }
        .with_ablation(ablation);
        emit(out, Fpan::new(config, seed).map_err(lift)?)
    })
}

/// New randomly initialized tiny model (8 channels, one block).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn fpan_model_new_tiny(scale: u32, seed: u64, out: *mut *mut FpanModel) -> FpanStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        emit(out, Fpan::new(ModelConfig::tiny(scale as usize), seed).map_err(lift)?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fpan_model_load(path: *const c_char, out: *mut *mut FpanModel) -> FpanStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        emit(out, load_checkpoint(path).map_err(lift)?)
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fpan_model_save(model: *const FpanModel, path: *const c_char) -> FpanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        save_checkpoint(&m.inner, path_arg(path)?).map_err(lift)
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fpan_model_free(model: *mut FpanModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fpan_model_scale(model: *const FpanModel, out: *mut u32) -> FpanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.inner.scale() as u32;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fpan_model_param_count(model: *const FpanModel, out: *mut u64) -> FpanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.inner.param_count() as u64;
        Ok(())
    })
}

/// Upscale a `width x height` RGB image into `out`, which must hold
/// `3 * scale^2 * width * height` bytes (`out_len`). A non-zero `ensemble`
/// averages over the eight flips and rotations.
///
/// # Safety
/// `input` must point to `3 * width * height` bytes and `out` to `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fpan_super_resolve(
    model: *const FpanModel,
    input: *const u8,
    width: u32,
    height: u32,
    ensemble: c_int,
    out: *mut u8,
    out_len: usize,
) -> FpanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let lr = image_arg(input, width, height, "input")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = m.inner.scale();
        let need = 3 * s * s * lr.width * lr.height;
        if out_len < need {
            return Err(invalid(format!("output buffer holds {out_len} bytes, {need} needed")));
        }
        let sr = if ensemble != 0 {
            self_ensemble_sr(&m.inner, &lr)
        } else {
            m.inner.upscale(&lr)
        }
        .map_err(lift)?;
        ptr::copy_nonoverlapping(sr.data.as_ptr(), out, need);
        Ok(())
    })
}

unsafe fn metric(
    a: *const u8,
    b: *const u8,
    width: u32,
    height: u32,
    shave: u32,
    out: *mut f64,
    f: fn(&ImageU8, &ImageU8, usize) -> fpan::Result<f64>,
) -> FpanStatus {
    guard(|| {
        let a = image_arg(a, width, height, "first image")?;
        let b = image_arg(b, width, height, "second image")?;
        let v = f(&a, &b, shave as usize).map_err(lift)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Y-channel PSNR in dB after removing `shave` border pixels; +inf for identical images.
///
/// # Safety
/// `a` and `b` must each point to `3 * width * height` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fpan_psnr_y(
    a: *const u8,
    b: *const u8,
    width: u32,
    height: u32,
    shave: u32,
    out: *mut f64,
) -> FpanStatus {
    metric(a, b, width, height, shave, out, psnr_y)
}

/// Y-channel SSIM after removing `shave` border pixels.
///
/// # Safety
/// `a` and `b` must each point to `3 * width * height` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fpan_ssim_y(
    a: *const u8,
    b: *const u8,
    width: u32,
    height: u32,
    shave: u32,
    out: *mut f64,
) -> FpanStatus {
    metric(a, b, width, height, shave, out, ssim_y)
}
