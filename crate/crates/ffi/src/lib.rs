//! C interface: Haar wavelet transforms and model inference over opaque
//! handles. Every function returns an [`AmsfStatus`]; on failure a message
//! is available from [`amsf_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use amsf_core::harness::Checkpoint;
use amsf_core::model::{AmsfNet, ModelConfig};
use amsf_core::{similarity, wavelet, Error};
use ndarray::{s, Array2, ArrayView2};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmsfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Checkpoint = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct AmsfModel {
    net: AmsfNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(AmsfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension(_) => AmsfStatus::Dimension,
            Error::Io { .. } | Error::Image(_) => AmsfStatus::Io,
            Error::Checkpoint(_) | Error::Json(_) => AmsfStatus::Checkpoint,
            _ => AmsfStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: AmsfStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AmsfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AmsfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AmsfStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(fail(AmsfStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(fail(AmsfStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a>(ptr: *const AmsfModel) -> Result<&'a AmsfModel, Failure> {
    ptr.as_ref().ok_or_else(|| fail(AmsfStatus::NullPointer, "model handle is null"))
}

unsafe fn c_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(fail(AmsfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(AmsfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn checked_area(rows: usize, cols: usize) -> Result<usize, Failure> {
    rows.checked_mul(cols)
        .ok_or_else(|| fail(AmsfStatus::Dimension, "image size overflows"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn amsf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the last error message, excluding the terminator;
/// 0 when the last call succeeded.
#[no_mangle]
pub extern "C" fn amsf_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |m| m.as_bytes().len()))
}

/// Copies the last error message into `buf` (always NUL-terminated when
/// `buf_len > 0`). Returns `BUFFER_TOO_SMALL` when the message was truncated.
///
/// # Safety
/// `buf` must point to `buf_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn amsf_last_error_message(buf: *mut c_char, buf_len: usize) -> AmsfStatus {
    if buf.is_null() || buf_len == 0 {
        return AmsfStatus::NullPointer;
    }
    let msg = LAST_ERROR.with(|e| e.borrow().as_ref().map(|m| m.as_bytes().to_vec()).unwrap_or_default());
    let n = msg.len().min(buf_len - 1);
    std::ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
    *buf.add(n) = 0;
    if n < msg.len() {
        AmsfStatus::BufferTooSmall
    } else {
        AmsfStatus::Ok
    }
}

/// Multi-level orthonormal Haar analysis of a row-major `rows x cols` image.
///
/// `output` (also `rows x cols`) receives the packed pyramid: at each level
/// the current low-pass region is split into quadrants, LL top-left, HL
/// (column differences) top-right, LH (row differences) bottom-left and HH
/// bottom-right. Both sides must be divisible by `2^levels`, `levels` in 1..=4.
///
/// # Safety
/// `input` and `output` must each point to `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn amsf_haar_dwt(
    input: *const f64,
    rows: usize,
    cols: usize,
    levels: usize,
    output: *mut f64,
) -> AmsfStatus {
    guard(|| {
        let n = checked_area(rows, cols)?;
        let src = slice(input, n, "input")?;
        let dst = slice_mut(output, n, "output")?;
        check_shape(rows, cols, levels)?;
        let img = ArrayView2::from_shape((rows, cols), src).map_err(|e| fail(AmsfStatus::Dimension, e.to_string()))?;
        let pyr = wavelet::dwt_cascade(img, levels)?;
        let mut packed = Array2::zeros((rows, cols));
        for l in 1..=levels {
            let b = pyr.level(l);
            let (h, w) = b.dim();
            packed.slice_mut(s![..h, w..2 * w]).assign(&b.hl);
            packed.slice_mut(s![h..2 * h, ..w]).assign(&b.lh);
            packed.slice_mut(s![h..2 * h, w..2 * w]).assign(&b.hh);
            if l == levels {
                packed.slice_mut(s![..h, ..w]).assign(&b.ll);
            }
        }
        dst.copy_from_slice(packed.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Exact inverse of [`amsf_haar_dwt`] for the same packed layout.
///
/// # Safety
/// `input` and `output` must each point to `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn amsf_haar_idwt(
    input: *const f64,
    rows: usize,
    cols: usize,
    levels: usize,
    output: *mut f64,
) -> AmsfStatus {
    guard(|| {
        let n = checked_area(rows, cols)?;
        let src = slice(input, n, "input")?;
        let dst = slice_mut(output, n, "output")?;
        check_shape(rows, cols, levels)?;
        let packed = ArrayView2::from_shape((rows, cols), src).map_err(|e| fail(AmsfStatus::Dimension, e.to_string()))?;
        let (h, w) = (rows >> levels, cols >> levels);
        let mut ll = packed.slice(s![..h, ..w]).to_owned();
        for l in (1..=levels).rev() {
            let (h, w) = (rows >> l, cols >> l);
            let bands = wavelet::Subbands {
                ll,
                lh: packed.slice(s![h..2 * h, ..w]).to_owned(),
                hl: packed.slice(s![..h, w..2 * w]).to_owned(),
                hh: packed.slice(s![h..2 * h, w..2 * w]).to_owned(),
            };
            ll = wavelet::idwt_level(&bands)?;
        }
        dst.copy_from_slice(ll.as_slice().expect("standard layout"));
        Ok(())
    })
}

fn check_shape(rows: usize, cols: usize, levels: usize) -> Result<(), Failure> {
    wavelet::check_levels(levels)?;
    let m = 1usize << levels;
    if rows == 0 || cols == 0 || !rows.is_multiple_of(m) || !cols.is_multiple_of(m) {
        return Err(fail(
            AmsfStatus::Dimension,
            format!("{rows}x{cols} is not divisible by 2^{levels}"),
        ));
    }
    Ok(())
}

/// Creates a freshly initialized model. `config_toml` holds model settings
/// (the keys of a run config's `[model]` section) and may be null for
/// defaults.
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be a
/// valid pointer. The handle must be released with [`amsf_model_free`].
#[no_mangle]
pub unsafe extern "C" fn amsf_model_new(config_toml: *const c_char, seed: u64, out: *mut *mut AmsfModel) -> AmsfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| fail(AmsfStatus::NullPointer, "out is null"))?;
        *out = std::ptr::null_mut();
        let config: ModelConfig = if config_toml.is_null() {
            ModelConfig::default()
        } else {
            let text = c_str(config_toml, "config")?;
            amsf_core::harness::config::RunConfig::from_toml(&format!("[model]\n{text}"), &[])?.model
        };
        let net = AmsfNet::new(config, seed)?;
        *out = Box::into_raw(Box::new(AmsfModel { net }));
        Ok(())
    })
}

/// Loads a model from a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amsf_model_load(path: *const c_char, out: *mut *mut AmsfModel) -> AmsfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| fail(AmsfStatus::NullPointer, "out is null"))?;
        *out = std::ptr::null_mut();
        let path = c_str(path, "path")?;
        let ck = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(AmsfModel { net: ck.net }));
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn amsf_model_free(model: *mut AmsfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square images the model expects; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn amsf_model_image_size(model: *const AmsfModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.config.image_size)
}

/// Length of the embedding vectors produced by [`amsf_model_embed`]; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn amsf_model_embedding_dim(model: *const AmsfModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.config.d_model)
}

fn features_of(net: &AmsfNet, pixels: &[f64]) -> Result<Array2<f64>, Failure> {
    let s = net.config.image_size;
    let img = ArrayView2::from_shape((s, s), pixels).map_err(|e| fail(AmsfStatus::Dimension, e.to_string()))?;
    Ok(net.features(&net.prepare(img)?)?)
}

/// Pooled eval-mode feature vector of one row-major `rows x cols` image in
/// `[0, 1]`. The image must match [`amsf_model_image_size`].
///
/// # Safety
/// `image` must point to `rows * cols` doubles and `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn amsf_model_embed(
    model: *const AmsfModel,
    image: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> AmsfStatus {
    guard(|| {
        let m = handle(model)?;
        let s = m.net.config.image_size;
        if (rows, cols) != (s, s) {
            return Err(fail(AmsfStatus::Dimension, format!("model expects {s}x{s}, got {rows}x{cols}")));
        }
        let pixels = slice(image, checked_area(rows, cols)?, "image")?;
        let d = m.net.config.d_model;
        if out_len < d {
            return Err(fail(AmsfStatus::BufferTooSmall, format!("embedding needs {d} values, buffer holds {out_len}")));
        }
        let dst = slice_mut(out, d, "out")?;
        let pooled = AmsfNet::pooled(&features_of(&m.net, pixels)?);
        dst.copy_from_slice(&pooled);
        Ok(())
    })
}

/// Classifies `n_query` query images against an `n_way`-class support set
/// of `k_shot` images per class. Images are row-major squares of side
/// [`amsf_model_image_size`], packed contiguously; `support` is ordered by
/// class, then shot. Writes `n_query * n_way` row-major class probabilities
/// and, when `predictions` is non-null, `n_query` predicted class indices.
///
/// # Safety
/// Every pointer must cover the number of elements described above.
#[no_mangle]
pub unsafe extern "C" fn amsf_model_classify(
    model: *const AmsfModel,
    support: *const f64,
    n_way: usize,
    k_shot: usize,
    queries: *const f64,
    n_query: usize,
    probabilities: *mut f64,
    predictions: *mut usize,
) -> AmsfStatus {
    guard(|| {
        let m = handle(model)?;
        if n_way < 2 || k_shot == 0 || n_query == 0 {
            return Err(fail(AmsfStatus::InvalidArgument, "need n_way >= 2, k_shot >= 1, n_query >= 1"));
        }
        let s = m.net.config.image_size;
        let area = s * s;
        let too_big = || fail(AmsfStatus::InvalidArgument, "episode size overflows");
        let n_support = n_way.checked_mul(k_shot).ok_or_else(too_big)?;
        let sup = slice(support, n_support.checked_mul(area).ok_or_else(too_big)?, "support")?;
        let qry = slice(queries, n_query.checked_mul(area).ok_or_else(too_big)?, "queries")?;
        let probs = slice_mut(probabilities, n_query.checked_mul(n_way).ok_or_else(too_big)?, "probabilities")?;
        let sup_f = sup
            .chunks_exact(area)
            .map(|px| features_of(&m.net, px))
            .collect::<Result<Vec<_>, _>>()?;
        let qry_f = qry
            .chunks_exact(area)
            .map(|px| features_of(&m.net, px))
            .collect::<Result<Vec<_>, _>>()?;
        let classes: Vec<Vec<&Array2<f64>>> = sup_f.chunks(k_shot).map(|c| c.iter().collect()).collect();
        let q: Vec<&Array2<f64>> = qry_f.iter().collect();
        let logits = m.net.logits_from_features(&classes, &q)?;
        for (i, row) in logits.rows().into_iter().enumerate() {
            let p = similarity::softmax(&row.to_vec());
            probs[i * n_way..(i + 1) * n_way].copy_from_slice(&p);
            if !predictions.is_null() {
                *predictions.add(i) = similarity::argmax(&p);
            }
        }
        Ok(())
    })
}
