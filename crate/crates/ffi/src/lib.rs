//! C interface. Images cross the boundary as planar `float` buffers
//! (`[3][H][W]`, values in `[0, 1]`); every call returns a [`BsvsrStatus`]
//! and details of the last failure on the calling thread are available
//! from [`bsvsr_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use bsvsr::degradation::{degrade_frame, BlurKernel, DegradationSpec, Image};
use bsvsr::evaluation::{psnr, ssim};
use bsvsr::flow::FlowProvider;
use bsvsr::kernel_estimation::estimate_kernel;
use bsvsr::model::{super_resolve, Bsvsr};
use bsvsr::training::Checkpoint;
use bsvsr::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BsvsrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Parse = 5,
    Incompatible = 6,
    NonFinite = 7,
    Panic = 8,
}

/// A loaded checkpoint, opaque to C.
pub struct BsvsrModel {
    model: Bsvsr,
    checkpoint: Checkpoint<f32>,
    provider: Box<dyn FlowProvider>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> BsvsrStatus {
    match err {
        Error::InvalidArgument(_) | Error::Config { .. } => BsvsrStatus::InvalidArgument,
        Error::Shape(_) => BsvsrStatus::Shape,
        Error::Io { .. } | Error::Png { .. } => BsvsrStatus::Io,
        Error::Parse(_) => BsvsrStatus::Parse,
        Error::Incompatible(_) => BsvsrStatus::Incompatible,
        Error::NonFinite(_) => BsvsrStatus::NonFinite,
    }
}

/// Run `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (BsvsrStatus, String)>) -> BsvsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BsvsrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            BsvsrStatus::Panic
        }
    }
}

fn lift(err: Error) -> (BsvsrStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (BsvsrStatus, String) {
    (BsvsrStatus::NullPointer, format!("`{what}` is null"))
}

fn bad(msg: impl Into<String>) -> (BsvsrStatus, String) {
    (BsvsrStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `ptr` must be null or point to `len` readable floats.
unsafe fn read_image(ptr: *const f32, channels: usize, h: usize, w: usize, what: &str) -> Result<Image, (BsvsrStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let n = channels
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| bad("image dimensions overflow"))?;
    if n == 0 {
        return Err(bad(format!("`{what}` has zero size")));
    }
    let src = std::slice::from_raw_parts(ptr, n);
    Tensor::from_vec(&[channels, h, w], src.iter().map(|&v| v as f64).collect()).map_err(lift)
}

/// # Safety
/// `out` must be null or point to `out_len` writable floats.
unsafe fn write_out(values: &[f64], out: *mut f32, out_len: usize) -> Result<(), (BsvsrStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    if out_len < values.len() {
        return Err((
            BsvsrStatus::Shape,
            format!("output buffer holds {out_len} floats, need {}", values.len()),
        ));
    }
    let dst = std::slice::from_raw_parts_mut(out, values.len());
    for (d, &v) in dst.iter_mut().zip(values) {
        *d = v as f32;
    }
    Ok(())
}

/// Message describing the most recent failure on this thread, or null.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bsvsr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn bsvsr_model_load(path: *const c_char, out: *mut *mut BsvsrModel) -> BsvsrStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| bad("path is not valid UTF-8"))?;
        let checkpoint = Checkpoint::<f32>::load(Path::new(path)).map_err(lift)?;
        let model = checkpoint.model().map_err(lift)?;
        let provider = checkpoint.config.flow.provider();
        *out = Box::into_raw(Box::new(BsvsrModel {
            model,
            checkpoint,
            provider,
        }));
        Ok(())
    })
}

/// Release a model; null is ignored.
///
/// # Safety
/// `model` must be null or come from [`bsvsr_model_load`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn bsvsr_model_free(model: *mut BsvsrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Upscaling factor, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn bsvsr_model_scale(model: *const BsvsrModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.config.scale as u32)
}

/// Frames per input window, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn bsvsr_model_frames(model: *const BsvsrModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.config.frames as u32)
}

/// Side length of estimated kernels, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn bsvsr_model_kernel_size(model: *const BsvsrModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.config.kernel_size as u32)
}

/// Super-resolve the centre of a window of `n_frames` LR frames laid out
/// `[n_frames][3][height][width]`. Writes `[3][s*height][s*width]` floats.
///
/// # Safety
/// `frames` must hold `n_frames*3*height*width` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn bsvsr_model_infer(
    model: *const BsvsrModel,
    frames: *const f32,
    n_frames: usize,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> BsvsrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if n_frames != m.model.config.frames {
            return Err(bad(format!(
                "model needs {} frames, got {n_frames}",
                m.model.config.frames
            )));
        }
        let all = read_image(frames, 3 * n_frames, height, width, "frames")?;
        let plane = 3 * height * width;
        let window: Vec<Image> = (0..n_frames)
            .map(|f| Tensor::from_vec(&[3, height, width], all.data()[f * plane..(f + 1) * plane].to_vec()))
            .collect::<Result<_, _>>()
            .map_err(lift)?;
        let refs: Vec<&Image> = window.iter().collect();
        let (sr, _) = super_resolve(&m.model, &m.checkpoint.params, &refs, m.provider.as_ref()).map_err(lift)?;
        write_out(sr.data(), out, out_len)
    })
}

/// Estimate the blur kernel of one LR frame `[3][height][width]`. Writes
/// `k*k` floats, `k` from [`bsvsr_model_kernel_size`].
///
/// # Safety
/// `frame` must hold `3*height*width` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn bsvsr_model_estimate_kernel(
    model: *const BsvsrModel,
    frame: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> BsvsrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let img = read_image(frame, 3, height, width, "frame")?;
        let k = estimate_kernel(&m.model.estimator, &m.checkpoint.params, &img).map_err(lift)?;
        write_out(k.values(), out, out_len)
    })
}

/// Gaussian blur (`sigma`, odd `kernel_size`) then bicubic downsampling by
/// `scale`. Writes `[3][height/scale][width/scale]` floats.
///
/// # Safety
/// `frame` must hold `3*height*width` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn bsvsr_degrade_frame(
    frame: *const f32,
    height: usize,
    width: usize,
    sigma: f64,
    kernel_size: usize,
    scale: usize,
    out: *mut f32,
    out_len: usize,
) -> BsvsrStatus {
    guard(|| {
        let img = read_image(frame, 3, height, width, "frame")?;
        let spec = BlurKernel::gaussian(kernel_size, sigma)
            .and_then(|k| DegradationSpec::new(k, scale))
            .map_err(lift)?;
        let lr = degrade_frame(&img, &spec).map_err(lift)?;
        write_out(lr.data(), out, out_len)
    })
}

/// PSNR (dB, peak 1, capped at 99) of two `[3][height][width]` images.
///
/// # Safety
/// `a` and `b` must hold `3*height*width` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bsvsr_psnr(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> BsvsrStatus {
    metric(a, b, height, width, out, psnr)
}

/// Luminance SSIM of two `[3][height][width]` images (both sides >= 11).
///
/// # Safety
/// `a` and `b` must hold `3*height*width` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bsvsr_ssim(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> BsvsrStatus {
    metric(a, b, height, width, out, ssim)
}

unsafe fn metric(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
    f: fn(&Image, &Image) -> bsvsr::Result<f64>,
) -> BsvsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = read_image(a, 3, height, width, "a")?;
        let b = read_image(b, 3, height, width, "b")?;
        *out = f(&a, &b).map_err(lift)?;
        Ok(())
    })
}
