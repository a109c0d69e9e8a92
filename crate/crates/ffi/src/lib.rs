//! C ABI over the fusion-counting model.
//!
//! Every fallible function returns an [`FcStatus`]; on failure a message is
//! available from [`fc_last_error`] on the calling thread. Models are opaque
//! [`FcModel`] handles released with [`fc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fusion_counting::data::{synth_dataset, write_dataset};
use fusion_counting::model::{forward_images, init_params_for, Heads, DENSITY_STRIDE};
use fusion_counting::{load_checkpoint, save_checkpoint, Error, Mode, ModelParams, Tensor};

/// Result codes of all fallible calls.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Compute = 5,
    Panic = 6,
}

/// Architecture and training mode of a model.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FcMode {
    Multitask = 0,
    StFusion = 1,
    StCount = 2,
    NoDw = 3,
    Series = 4,
}

impl From<FcMode> for Mode {
    fn from(m: FcMode) -> Self {
        match m {
            FcMode::Multitask => Mode::Multitask,
            FcMode::StFusion => Mode::StFusion,
            FcMode::StCount => Mode::StCount,
            FcMode::NoDw => Mode::NoDw,
            FcMode::Series => Mode::Series,
        }
    }
}

impl From<Mode> for FcMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Multitask => FcMode::Multitask,
            Mode::StFusion => FcMode::StFusion,
            Mode::StCount => FcMode::StCount,
            Mode::NoDw => FcMode::NoDw,
            Mode::Series => FcMode::Series,
        }
    }
}

/// Opaque model handle.
pub struct FcModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> FcStatus {
    match err {
        Error::Config(_) | Error::Data(_) => FcStatus::InvalidArgument,
        Error::Io { .. } | Error::MissingFile(_) => FcStatus::Io,
        Error::Format { .. } => FcStatus::Format,
        _ => FcStatus::Compute,
    }
}

fn guard(f: impl FnOnce() -> Result<(), FcStatus>) -> FcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FcStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic");
            FcStatus::Panic
        }
    }
}

fn fail(err: Error) -> FcStatus {
    set_error(err.to_string());
    status_of(&err)
}

fn invalid(msg: impl Into<String>) -> FcStatus {
    set_error(msg);
    FcStatus::InvalidArgument
}

fn null(what: &str) -> FcStatus {
    set_error(format!("{what} is null"));
    FcStatus::NullPointer
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, FcStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Freshly initialized model for `mode` and `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn fc_model_init(mode: FcMode, seed: u64, out: *mut *mut FcModel) -> FcStatus {
    if out.is_null() {
        return null("out");
    }
    guard(|| {
        let model = Box::new(FcModel {
            params: init_params_for(mode.into(), seed),
        });
        *out = Box::into_raw(model);
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fc_model_load(path: *const c_char, out: *mut *mut FcModel) -> FcStatus {
    if out.is_null() {
        return null("out");
    }
    guard(|| {
        let path = path_arg(path, "path")?;
        let params = load_checkpoint(&path).map_err(fail)?;
        *out = Box::into_raw(Box::new(FcModel { params }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fc_model_save(model: *const FcModel, path: *const c_char) -> FcStatus {
    if model.is_null() {
        return null("model");
    }
    guard(|| {
        let path = path_arg(path, "path")?;
        save_checkpoint(&(*model).params, &path).map_err(fail)
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fc_model_free(model: *mut FcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mode recorded in the model.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fc_model_mode(model: *const FcModel, out: *mut FcMode) -> FcStatus {
    if model.is_null() {
        return null("model");
    }
    if out.is_null() {
        return null("out");
    }
    *out = (*model).params.mode().into();
    FcStatus::Ok
}

/// Number of scalar parameters.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fc_model_num_params(model: *const FcModel, out: *mut usize) -> FcStatus {
    if model.is_null() {
        return null("model");
    }
    if out.is_null() {
        return null("out");
    }
    *out = (*model).params.num_scalars();
    FcStatus::Ok
}

/// Density-map size for an `height x width` input.
///
/// # Safety
/// `out_height` and `out_width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fc_density_size(
    height: usize,
    width: usize,
    out_height: *mut usize,
    out_width: *mut usize,
) -> FcStatus {
    if out_height.is_null() || out_width.is_null() {
        return null("output size");
    }
    if height == 0 || width == 0 || height % DENSITY_STRIDE != 0 || width % DENSITY_STRIDE != 0 {
        return invalid(format!("size {height}x{width} is not a positive multiple of {DENSITY_STRIDE}"));
    }
    *out_height = height / DENSITY_STRIDE;
    *out_width = width / DENSITY_STRIDE;
    FcStatus::Ok
}

/// Runs both heads on one image pair.
///
/// `visible` holds `3 * height * width` planar RGB values and `infrared`
/// `height * width` values, all in `[0, 1]`. `fused` receives `height * width`
/// values; `density` receives the map of [`fc_density_size`]; `count` the
/// density sum. Any output pointer may be NULL to skip it.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn fc_model_forward(
    model: *const FcModel,
    visible: *const f32,
    infrared: *const f32,
    height: usize,
    width: usize,
    fused: *mut f32,
    density: *mut f32,
    count: *mut f64,
) -> FcStatus {
    if model.is_null() {
        return null("model");
    }
    if visible.is_null() || infrared.is_null() {
        return null("input image");
    }
    guard(|| {
        let n = height.checked_mul(width).ok_or_else(|| invalid("image size overflows"))?;
        let lift = |p: *const f32, len: usize| -> Vec<f64> {
            std::slice::from_raw_parts(p, len).iter().map(|&v| f64::from(v)).collect()
        };
        let vis = Tensor::from_vec(&[3, height, width], lift(visible, 3 * n));
        let ir = Tensor::from_vec(&[1, height, width], lift(infrared, n));
        let pred = forward_images(&vis, &ir, &(*model).params, Heads::Both, &mut ()).map_err(fail)?;
        let (f, d) = (pred.fused.expect("fusion head"), pred.density.expect("count head"));
        let store = |dst: *mut f32, src: &Tensor| {
            if !dst.is_null() {
                for (o, &v) in std::slice::from_raw_parts_mut(dst, src.len()).iter_mut().zip(src.data()) {
                    *o = v as f32;
                }
            }
        };
        store(fused, &f);
        store(density, &d);
        if !count.is_null() {
            *count = d.sum();
        }
        Ok(())
    })
}

/// Writes a synthetic dataset of `count` samples to `out_dir`.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fc_synth_dataset(
    out_dir: *const c_char,
    count: usize,
    height: usize,
    width: usize,
    min_people: usize,
    max_people: usize,
    seed: u64,
) -> FcStatus {
    guard(|| {
        let dir = path_arg(out_dir, "out_dir")?;
        if count == 0 || min_people > max_people {
            return Err(invalid("need count >= 1 and min_people <= max_people"));
        }
        let samples = synth_dataset(count, height, width, (min_people, max_people), seed).map_err(fail)?;
        write_dataset(&samples, &dir).map_err(fail)
    })
}
