//! C ABI over the `vidfuse` library.
//!
//! Every fallible function returns a [`VfStatus`]. On failure the message is
//! available from [`vf_last_error_message`] on the same thread. Handles are
//! opaque and owned by the caller once returned; release them with
//! [`vf_tensor_free`] and strings with [`vf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use vidfuse::config::RunConfig;
use vidfuse::pipeline::{generate_synthetic, run_restoration, SyntheticKind, TaskSpec};
use vidfuse::{io, pipeline, quality, Error, FlowField, VideoTensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Config = 7,
    Panic = 8,
}

/// Opaque video or flow tensor with dims `(T, C, H, W)` in row-major order.
pub struct VfTensor {
    inner: VideoTensor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VfStatus {
    match e {
        Error::Stage { source, .. } => status_of(source),
        Error::Shape(_) | Error::DimOverflow(_) => VfStatus::Shape,
        Error::Io { .. } => VfStatus::Io,
        Error::Format { .. } => VfStatus::Format,
        Error::Config(_) => VfStatus::Config,
        Error::Scoring(_) | Error::Metric(_) | Error::NonFinite(_) => VfStatus::Numeric,
        _ => VfStatus::InvalidArgument,
    }
}

struct Fail(VfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult = Result<(), Fail>;

fn guard(f: impl FnOnce() -> FfiResult) -> VfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            VfStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            VfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(VfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn tensor_ref<'a>(t: *const VfTensor, what: &str) -> Result<&'a VideoTensor, Fail> {
    t.as_ref().map(|t| &t.inner).ok_or_else(|| null(what))
}

unsafe fn opt_tensor<'a>(t: *const VfTensor) -> Option<&'a VideoTensor> {
    t.as_ref().map(|t| &t.inner)
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(VfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<T>(out: *mut T, what: &str) -> Result<&'static mut T, Fail> {
    out.as_mut().ok_or_else(|| null(what))
}

fn boxed(t: VideoTensor) -> *mut VfTensor {
    Box::into_raw(Box::new(VfTensor { inner: t }))
}

unsafe fn config_arg(toml: *const c_char) -> Result<RunConfig, Fail> {
    if toml.is_null() {
        return Ok(RunConfig::default());
    }
    Ok(RunConfig::from_toml(str_arg(toml, "config")?)?)
}

fn flow_of(t: &VideoTensor) -> Result<FlowField, Fail> {
    Ok(FlowField::new(t.clone())?)
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn vf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copies `len` floats into a new tensor with dims `dims[0..4]`.
///
/// # Safety
/// `dims` must point to 4 values and `data` to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn vf_tensor_new(
    dims: *const usize,
    data: *const f32,
    len: usize,
    out: *mut *mut VfTensor,
) -> VfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if dims.is_null() || (data.is_null() && len > 0) {
            return Err(null("dims or data"));
        }
        let d = std::slice::from_raw_parts(dims, 4);
        let values = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(data, len).to_vec()
        };
        *out = boxed(VideoTensor::new([d[0], d[1], d[2], d[3]], values)?);
        Ok(())
    })
}

/// Releases a tensor. Null is ignored.
///
/// # Safety
/// `t` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vf_tensor_free(t: *mut VfTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Writes the 4 dims of `t` to `out`.
///
/// # Safety
/// `out` must have room for 4 values.
#[no_mangle]
pub unsafe extern "C" fn vf_tensor_dims(t: *const VfTensor, out: *mut usize) -> VfStatus {
    guard(|| {
        let t = tensor_ref(t, "tensor")?;
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, 4).copy_from_slice(&t.dims());
        Ok(())
    })
}

/// Borrowed pointer to the tensor data; `len` receives the element count.
/// Null when `t` is null. Valid while `t` lives.
///
/// # Safety
/// `t` must be a live handle; `len` may be null.
#[no_mangle]
pub unsafe extern "C" fn vf_tensor_data(t: *const VfTensor, len: *mut usize) -> *const f32 {
    match t.as_ref() {
        Some(t) => {
            if let Some(l) = len.as_mut() {
                *l = t.inner.len();
            }
            t.inner.data().as_ptr()
        }
        None => ptr::null(),
    }
}

/// Reads a `.vten` file.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vf_tensor_load(path: *const c_char, out: *mut *mut VfTensor) -> VfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(io::load_raw(str_arg(path, "path")?)?);
        Ok(())
    })
}

/// Writes a `.vten` file.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vf_tensor_save(t: *const VfTensor, path: *const c_char) -> VfStatus {
    guard(|| {
        io::save_raw(tensor_ref(t, "tensor")?, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// PSNR of `a` against `b` in dB, capped at 99.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vf_psnr(a: *const VfTensor, b: *const VfTensor, out: *mut f64) -> VfStatus {
    guard(|| {
        *out_ptr(out, "out")? = quality::psnr(tensor_ref(a, "a")?, tensor_ref(b, "b")?)?;
        Ok(())
    })
}

/// Mean SSIM of `a` against `b`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vf_ssim(a: *const VfTensor, b: *const VfTensor, out: *mut f64) -> VfStatus {
    guard(|| {
        *out_ptr(out, "out")? = quality::ssim(tensor_ref(a, "a")?, tensor_ref(b, "b")?)?;
        Ok(())
    })
}

/// Warping error of `video` under `flow` (dims `(T-1, 2, H, W)`).
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vf_warping_error(
    video: *const VfTensor,
    flow: *const VfTensor,
    out: *mut f64,
) -> VfStatus {
    guard(|| {
        let flow = flow_of(tensor_ref(flow, "flow")?)?;
        *out_ptr(out, "out")? = quality::warping_error(tensor_ref(video, "video")?, &flow)?;
        Ok(())
    })
}

/// No-reference sharpness score.
///
/// # Safety
/// The handle must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vf_sharpness(video: *const VfTensor, out: *mut f64) -> VfStatus {
    guard(|| {
        *out_ptr(out, "out")? = quality::sharpness_proxy(tensor_ref(video, "video")?);
        Ok(())
    })
}

/// Synthetic clip `kind` (`moving_square`, `ramp`, `static`) and its flow.
///
/// # Safety
/// `kind` must be a NUL-terminated string; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn vf_generate_synthetic(
    kind: *const c_char,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
    video_out: *mut *mut VfTensor,
    flow_out: *mut *mut VfTensor,
) -> VfStatus {
    guard(|| {
        let (vo, fo) = (out_ptr(video_out, "video_out")?, out_ptr(flow_out, "flow_out")?);
        let kind: SyntheticKind = str_arg(kind, "kind")?.parse()?;
        let (v, f) = generate_synthetic(kind, frames, height, width, seed)?;
        *vo = boxed(v);
        *fo = boxed(f.into_tensor());
        Ok(())
    })
}

/// Applies the configured degradation. `config_toml` may be null for defaults.
///
/// # Safety
/// `clean` must be live; `config_toml` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vf_degrade(
    clean: *const VfTensor,
    config_toml: *const c_char,
    out: *mut *mut VfTensor,
) -> VfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = config_arg(config_toml)?;
        *out = boxed(pipeline::degrade(tensor_ref(clean, "clean")?, &cfg)?);
        Ok(())
    })
}

/// Restores `input`. `ground_truth`, `flow` and `config_toml` may be null.
/// On success `out` holds the restored clip and `report_json` the run report,
/// to be released with [`vf_string_free`].
///
/// # Safety
/// Non-null handles must be live; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn vf_restore(
    input: *const VfTensor,
    ground_truth: *const VfTensor,
    flow: *const VfTensor,
    config_toml: *const c_char,
    out: *mut *mut VfTensor,
    report_json: *mut *mut c_char,
) -> VfStatus {
    guard(|| {
        let (out, rep) = (out_ptr(out, "out")?, out_ptr(report_json, "report_json")?);
        let cfg = config_arg(config_toml)?;
        let mut spec = TaskSpec::new(&cfg, tensor_ref(input, "input")?.clone());
        if let Some(gt) = opt_tensor(ground_truth) {
            spec = spec.with_ground_truth(gt.clone());
        }
        if let Some(f) = opt_tensor(flow) {
            spec = spec.with_flow(flow_of(f)?);
        }
        let (restored, report) = run_restoration(&spec, &cfg)?;
        let json = CString::new(report.to_json()).map_err(|e| Fail(VfStatus::Format, e.to_string()))?;
        *out = boxed(restored);
        *rep = json.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
