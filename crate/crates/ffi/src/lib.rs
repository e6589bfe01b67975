//! C interface to the quantization toolkit.
//!
//! Every fallible function returns an [`FddaStatus`]; on failure the message
//! is available from [`fdda_last_error`] on the same thread. Models are
//! opaque handles released with [`fdda_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fdda::archive::{load_model, ModelArchive};
use fdda::cluster::silhouette_sample;
use fdda::quant::{compute_scale, dequantize, quantize, QuantParams};
use fdda::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FddaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    CorruptArchive = 5,
    VersionMismatch = 6,
    Config = 7,
    Panic = 8,
}

/// A loaded model archive.
pub struct FddaModel {
    archive: ModelArchive,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> FddaStatus {
    match e {
        Error::Shape(_) | Error::EmptyBatch => FddaStatus::Shape,
        Error::Invalid(_) | Error::Label { .. } => FddaStatus::InvalidArgument,
        Error::VersionMismatch { .. } => FddaStatus::VersionMismatch,
        Error::CorruptArchive(_) => FddaStatus::CorruptArchive,
        Error::Config(_) => FddaStatus::Config,
        Error::Io(_) => FddaStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FddaStatus, String)>) -> FddaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FddaStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FddaStatus::Panic
        }
    }
}

fn fail(e: Error) -> (FddaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FddaStatus, String) {
    (FddaStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn fdda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads an archive from a NUL-terminated UTF-8 path.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fdda_model_load(path: *const c_char, out: *mut *mut FddaModel) -> FddaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (FddaStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let archive = load_model(Path::new(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(FddaModel { archive }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`fdda_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fdda_model_free(model: *mut FddaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of batch-normalization layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdda_model_bn_layer_count(model: *const FddaModel) -> usize {
    model.as_ref().map_or(0, |m| m.archive.model.bn_layer_count())
}

/// Floats per input sample, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdda_model_input_len(model: *const FddaModel) -> usize {
    model.as_ref().map_or(0, |m| m.archive.model.input_shape.iter().product())
}

/// Logits per sample, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdda_model_output_len(model: *const FddaModel) -> usize {
    model.as_ref().map_or(0, |m| m.archive.model.output_shape().iter().product())
}

/// Whether the archive carries activation quantizers (1) or not (0).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdda_model_is_quantized(model: *const FddaModel) -> i32 {
    model.as_ref().map_or(0, |m| i32::from(m.archive.quant.is_some()))
}

/// Eval-mode logits for `batch` samples laid out contiguously. Quantized
/// archives run with their quantizers active.
///
/// # Safety
/// `images` must hold `batch * fdda_model_input_len` floats and `logits`
/// room for `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn fdda_model_predict(
    model: *const FddaModel,
    images: *const f32,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> FddaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if images.is_null() {
            return Err(null("images"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let net = &m.archive.model;
        let per: usize = net.input_shape.iter().product();
        let classes: usize = net.output_shape().iter().product();
        if batch == 0 {
            return Err(fail(Error::EmptyBatch));
        }
        if logits_len != batch * classes {
            return Err(fail(Error::Shape(format!("logits buffer holds {logits_len}, need {}", batch * classes))));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&net.input_shape);
        let x = Tensor::new(shape, std::slice::from_raw_parts(images, batch * per).to_vec()).map_err(fail)?;
        let y = net.predict_logits(&x, m.archive.quant.as_ref()).map_err(fail)?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// `(upper − lower) / (2^bits − 1)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fdda_compute_scale(bits: u32, lower: f32, upper: f32, out: *mut f32) -> FddaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = compute_scale(bits, lower, upper).map_err(fail)?;
        Ok(())
    })
}

/// Integer code of `x` under a `bits`-bit quantizer on `[lower, upper]`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fdda_quantize(x: f32, bits: u32, lower: f32, upper: f32, out: *mut i64) -> FddaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let q = QuantParams::new(bits, lower, upper).map_err(fail)?;
        *out = quantize(x, &q);
        Ok(())
    })
}

/// Real value of integer code `code`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fdda_dequantize(code: i64, bits: u32, lower: f32, upper: f32, out: *mut f32) -> FddaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let q = QuantParams::new(bits, lower, upper).map_err(fail)?;
        *out = dequantize(code, &q);
        Ok(())
    })
}

/// Silhouette of point `index` among `n` points of dimension `dim`
/// (row-major in `points`) clustered by `labels`.
///
/// # Safety
/// `points` must hold `n * dim` doubles and `labels` `n` entries.
#[no_mangle]
pub unsafe extern "C" fn fdda_silhouette(
    points: *const f64,
    n: usize,
    dim: usize,
    labels: *const usize,
    index: usize,
    out: *mut f64,
) -> FddaStatus {
    guard(|| {
        if points.is_null() || labels.is_null() {
            return Err(null("points or labels"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if index >= n || dim == 0 {
            return Err(fail(Error::Invalid(format!("index {index} of {n} points, dimension {dim}"))));
        }
        let pts = std::slice::from_raw_parts(points, n * dim);
        let labels = std::slice::from_raw_parts(labels, n);
        let rows: Vec<&[f64]> = pts.chunks_exact(dim).collect();
        let own_label = labels[index];
        let own: Vec<&[f64]> = rows.iter().zip(labels).filter(|(_, &l)| l == own_label).map(|(r, _)| *r).collect();
        let mut others: std::collections::BTreeMap<usize, Vec<&[f64]>> = std::collections::BTreeMap::new();
        for (r, &l) in rows.iter().zip(labels) {
            if l != own_label {
                others.entry(l).or_default().push(r);
            }
        }
        let others: Vec<Vec<&[f64]>> = others.into_values().collect();
        *out = silhouette_sample(rows[index], &own, &others).map_err(fail)?;
        Ok(())
    })
}

/// Archive format version this library reads and writes.
#[no_mangle]
pub extern "C" fn fdda_format_version() -> u32 {
    fdda::archive::FORMAT_VERSION
}
