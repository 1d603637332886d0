//! C interface to the perceptra metric.
//!
//! Every function returns a [`PcStatus`]; results go through out-pointers.
//! On failure the message is kept per thread and read with
//! [`pc_last_error_message`]. Images are planar `f64` buffers laid out
//! `[channels][height][width]` with values in `[0, 1]`.
//!
//! Handles returned by `pc_model_*` constructors are owned by the caller and
//! released with [`pc_model_free`]; byte buffers with [`pc_buffer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use perceptra::backbones::{load_weights, resolve_model, save_weights, BackboneGraph};
use perceptra::classical::{l1_distance, psnr, ssim, SsimConfig};
use perceptra::metric::{distance_auto, ChannelWeights, LayerAggregation, MetricOptions};
use perceptra::{Error, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Weights = 5,
    Numeric = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct PcModel {
    graph: BackboneGraph,
}

/// Byte buffer allocated by the library.
#[repr(C)]
pub struct PcBuffer {
    pub data: *mut u8,
    pub len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> PcStatus {
    match err {
        Error::Shape(_) => PcStatus::Shape,
        Error::InvalidArgument(_) => PcStatus::InvalidArgument,
        Error::Degenerate(_) | Error::NonFinite(_) => PcStatus::Numeric,
        Error::Weights(_) => PcStatus::Weights,
        Error::Io { .. } | Error::Image { .. } | Error::Json(_) | Error::Csv(_) => PcStatus::Io,
        _ => PcStatus::InvalidArgument,
    }
}

struct Fail(PcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PcStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(PcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(p: *const PcModel) -> Result<&'a PcModel, Fail> {
    p.as_ref().ok_or_else(|| null("model"))
}

unsafe fn image_arg(p: *const f64, channels: usize, height: usize, width: usize, what: &str) -> Result<Tensor, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let n = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail(PcStatus::Shape, format!("{what}: empty or oversized image")))?;
    let data = std::slice::from_raw_parts(p, n).to_vec();
    Ok(Tensor::new([1, channels, height, width], data)?)
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null("out"))
}

fn into_handle(graph: BackboneGraph, out: &mut *mut PcModel) {
    *out = Box::into_raw(Box::new(PcModel { graph }));
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a model from `builtin:<kind>:<scale>:<seed>` or a weight-file path.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_model_open(spec: *const c_char, out: *mut *mut PcModel) -> PcStatus {
    guard(|| {
        let out = out_arg(out)?;
        let graph = resolve_model(str_arg(spec, "spec")?)?;
        into_handle(graph, out);
        Ok(())
    })
}

/// Builds a model from weight-file bytes.
///
/// # Safety
/// `bytes` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn pc_model_from_bytes(bytes: *const u8, len: usize, out: *mut *mut PcModel) -> PcStatus {
    guard(|| {
        let out = out_arg(out)?;
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        let graph = load_weights(std::slice::from_raw_parts(bytes, len)).map_err(Error::from)?;
        into_handle(graph, out);
        Ok(())
    })
}

/// Serializes a model; release the buffer with [`pc_buffer_free`].
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pc_model_to_bytes(model: *const PcModel, out: *mut PcBuffer) -> PcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out_arg(out)?;
        let bytes = save_weights(&m.graph).into_boxed_slice();
        out.len = bytes.len();
        out.data = Box::into_raw(bytes) as *mut u8;
        Ok(())
    })
}

/// Writes a model's weight file to `path`.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pc_model_save(model: *const PcModel, path: *const c_char) -> PcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = str_arg(path, "path")?;
        std::fs::write(path, save_weights(&m.graph)).map_err(|e| Error::io(path, e))?;
        Ok(())
    })
}

/// Number of tapped layers.
///
/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn pc_model_tap_count(model: *const PcModel, out: *mut usize) -> PcStatus {
    guard(|| {
        let m = model_arg(model)?;
        *out_arg(out)? = m.graph.tap_channels().len();
        Ok(())
    })
}

/// Channel count of every tapped layer, written to `out[0..capacity]`.
/// `written` receives the number of taps even when `capacity` is too small.
///
/// # Safety
/// `out` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn pc_model_tap_channels(
    model: *const PcModel,
    out: *mut usize,
    capacity: usize,
    written: *mut usize,
) -> PcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let channels = m.graph.tap_channels();
        *out_arg(written)? = channels.len();
        if capacity < channels.len() {
            return Err(Fail(PcStatus::InvalidArgument, format!("need room for {} taps", channels.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, channels.len()).copy_from_slice(&channels);
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pc_model_free(model: *mut PcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Releases a buffer from [`pc_model_to_bytes`]. Empty buffers are ignored.
///
/// # Safety
/// `buffer` must have been filled by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn pc_buffer_free(buffer: PcBuffer) {
    if !buffer.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buffer.data, buffer.len)));
    }
}

/// Learned perceptual distance between two images of the same shape.
///
/// `weights` holds the per-channel weights of every tap concatenated in tap
/// order (`weights_len` values) or is null for all ones. `mean_layers`
/// averages the layer terms instead of summing them.
///
/// # Safety
/// Image pointers must hold `channels * height * width` values.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pc_coper_distance(
    model: *const PcModel,
    weights: *const f64,
    weights_len: usize,
    a: *const f64,
    b: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    mean_layers: bool,
    out: *mut f64,
) -> PcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out_arg(out)?;
        let taps = m.graph.tap_channels();
        let w = if weights.is_null() {
            ChannelWeights::ones_for(&taps)
        } else {
            let total: usize = taps.iter().sum();
            if weights_len != total {
                return Err(Fail(PcStatus::Shape, format!("expected {total} channel weights, got {weights_len}")));
            }
            let flat = std::slice::from_raw_parts(weights, weights_len);
            let mut per_layer = Vec::with_capacity(taps.len());
            let mut at = 0;
            for c in taps {
                per_layer.push(flat[at..at + c].to_vec());
                at += c;
            }
            ChannelWeights::new(per_layer)?
        };
        let x = image_arg(a, channels, height, width, "a")?;
        let y = image_arg(b, channels, height, width, "b")?;
        let aggregation = if mean_layers { LayerAggregation::Mean } else { LayerAggregation::Sum };
        *out = distance_auto(&m.graph, &w, &x, &y, MetricOptions { aggregation, normalize: true })?.total;
        Ok(())
    })
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
///
/// # Safety
/// Image pointers must hold `channels * height * width` values.
#[no_mangle]
pub unsafe extern "C" fn pc_psnr(
    a: *const f64,
    b: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    peak: f64,
    out: *mut f64,
) -> PcStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = psnr(&image_arg(a, channels, height, width, "a")?, &image_arg(b, channels, height, width, "b")?, peak)?;
        Ok(())
    })
}

/// SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.
///
/// # Safety
/// Image pointers must hold `channels * height * width` values.
#[no_mangle]
pub unsafe extern "C" fn pc_ssim(
    a: *const f64,
    b: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    peak: f64,
    out: *mut f64,
) -> PcStatus {
    guard(|| {
        let out = out_arg(out)?;
        let config = SsimConfig::default().with_peak(peak);
        *out = ssim(&image_arg(a, channels, height, width, "a")?, &image_arg(b, channels, height, width, "b")?, &config)?;
        Ok(())
    })
}

/// Mean absolute difference.
///
/// # Safety
/// Image pointers must hold `channels * height * width` values.
#[no_mangle]
pub unsafe extern "C" fn pc_l1(
    a: *const f64,
    b: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> PcStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = l1_distance(&image_arg(a, channels, height, width, "a")?, &image_arg(b, channels, height, width, "b")?)?;
        Ok(())
    })
}
