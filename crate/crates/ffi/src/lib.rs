//! C ABI over the `phreg` core.
//!
//! Objects cross the boundary as opaque handles that the caller frees with the
//! matching `*_free` function. Every fallible call returns a [`PhregStatus`];
//! on failure the message is available from [`phreg_last_error`] on the same
//! thread. Panics are caught and reported as [`PhregStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use phreg::error::Error;
use phreg::image::Image;
use phreg::io::{self, RunConfig};
use phreg::rng;
use phreg::tta::denoise;
use phreg::vit::{FeatureGrid, ViTModel};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhregStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Numeric = 7,
    Panic = 8,
}

impl From<&Error> for PhregStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } | Error::NonScalarLoss(_) => PhregStatus::Shape,
            Error::InvalidArgument(_) | Error::UnknownGroup(_) | Error::Uncovered { .. } => PhregStatus::InvalidArgument,
            Error::NonFinite(_) => PhregStatus::Numeric,
            Error::Format(_) => PhregStatus::Format,
            Error::Config(_) => PhregStatus::Config,
            Error::Io { .. } | Error::Image { .. } | Error::Csv(_) => PhregStatus::Io,
        }
    }
}

/// Opaque model handle.
pub struct PhregModel {
    model: ViTModel<f32>,
}

/// Opaque dense feature grid, `rows × cols × dim` row-major.
pub struct PhregFeatures {
    grid: FeatureGrid<f32>,
    coverage: Vec<u32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (PhregStatus, String)>) -> PhregStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PhregStatus::Ok,
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            PhregStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (PhregStatus, String)>;
}

impl<T> IntoFfi<T> for phreg::error::Result<T> {
    fn ffi(self) -> Result<T, (PhregStatus, String)> {
        self.map_err(|e| (PhregStatus::from(&e), e.to_string()))
    }
}

fn null(what: &str) -> (PhregStatus, String) {
    (PhregStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PhregStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PhregStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn image_from(pixels: *const f32, height: usize, width: usize) -> Result<Image, (PhregStatus, String)> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| (PhregStatus::InvalidArgument, "image extents overflow".to_string()))?;
    Image::new(height, width, std::slice::from_raw_parts(pixels, n).to_vec()).ffi()
}

fn boxed_features(grid: FeatureGrid<f32>) -> *mut PhregFeatures {
    let coverage = grid.coverage().map(<[u32]>::to_vec).unwrap_or_else(|| vec![1; grid.rows() * grid.cols()]);
    Box::into_raw(Box::new(PhregFeatures { grid, coverage }))
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn phreg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Build the noisy teacher described by a run config. `config_toml` may be
/// null for the default config.
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn phreg_teacher_new(config_toml: *const c_char, out: *mut *mut PhregModel) -> PhregStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(c_str(config_toml, "config_toml")?).ffi()?
        };
        let model = cfg.teacher().ffi()?;
        *out = Box::into_raw(Box::new(PhregModel { model }));
        Ok(())
    })
}

/// Load a checkpoint written by `phreg distill`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn phreg_model_load(path: *const c_char, out: *mut *mut PhregModel) -> PhregStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, _) = io::load_model(Path::new(c_str(path, "path")?)).ffi()?;
        *out = Box::into_raw(Box::new(PhregModel { model }));
        Ok(())
    })
}

/// Save a model as a checkpoint container.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn phreg_model_save(model: *const PhregModel, path: *const c_char) -> PhregStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        io::save_model(Path::new(c_str(path, "path")?), &m.model, "").ffi()
    })
}

/// Input size, patch size, embedding width and register count.
///
/// # Safety
/// `model` must come from this library. Output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn phreg_model_info(
    model: *const PhregModel,
    height: *mut usize,
    width: *mut usize,
    patch_size: *mut usize,
    dim: *mut usize,
    registers: *mut usize,
) -> PhregStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let c = &m.config;
        for (p, v) in [
            (height, c.image_height),
            (width, c.image_width),
            (patch_size, c.patch_size),
            (dim, c.embed_dim),
            (registers, m.num_registers()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn phreg_model_free(model: *mut PhregModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Dense patch features for an interleaved RGB image of `height × width × 3`
/// floats in `[0, 1]`.
///
/// # Safety
/// `pixels` must point to `height * width * 3` floats; `model` must come
/// from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn phreg_forward(
    model: *const PhregModel,
    pixels: *const f32,
    height: usize,
    width: usize,
    out: *mut *mut PhregFeatures,
) -> PhregStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if out.is_null() {
            return Err(null("out"));
        }
        let img = image_from(pixels, height, width)?;
        *out = boxed_features(m.forward_features(&img).ffi()?);
        Ok(())
    })
}

/// Test-time-augmentation denoising with `n_augmentations` views (the first
/// is the identity), drawn deterministically from `seed`.
///
/// # Safety
/// As for [`phreg_forward`].
#[no_mangle]
pub unsafe extern "C" fn phreg_denoise(
    model: *const PhregModel,
    pixels: *const f32,
    height: usize,
    width: usize,
    n_augmentations: usize,
    seed: u64,
    out: *mut *mut PhregFeatures,
) -> PhregStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if out.is_null() {
            return Err(null("out"));
        }
        let img = image_from(pixels, height, width)?;
        let cfg = phreg::tta::DenoiseConfig { n_augmentations, ..Default::default() };
        let mut r = rng::stream(seed, "denoise");
        *out = boxed_features(denoise(m, &img, m.config.patch_size, &cfg, &mut r).ffi()?);
        Ok(())
    })
}

/// Grid extents. Output pointers may be null.
///
/// # Safety
/// `features` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn phreg_features_shape(
    features: *const PhregFeatures,
    rows: *mut usize,
    cols: *mut usize,
    dim: *mut usize,
) -> PhregStatus {
    guard(|| {
        let f = &features.as_ref().ok_or_else(|| null("features"))?.grid;
        for (p, v) in [(rows, f.rows()), (cols, f.cols()), (dim, f.dim())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Borrowed pointer to `rows * cols * dim` floats, valid until the handle is
/// freed. Null for a null handle.
///
/// # Safety
/// `features` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn phreg_features_data(features: *const PhregFeatures) -> *const f32 {
    features.as_ref().map_or(ptr::null(), |f| f.grid.values().as_ptr())
}

/// Borrowed pointer to `rows * cols` per-location view counts. Raw forward
/// outputs report 1 everywhere.
///
/// # Safety
/// `features` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn phreg_features_coverage(features: *const PhregFeatures) -> *const u32 {
    features.as_ref().map_or(ptr::null(), |f| f.coverage.as_ptr())
}

/// # Safety
/// `features` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn phreg_features_free(features: *mut PhregFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}
