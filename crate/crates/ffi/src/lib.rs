//! C ABI over `landmoe`.
//!
//! Every function returns an [`LmStatus`]. On failure the message is kept
//! per thread and can be read with [`lm_last_error`]. Models are opaque
//! handles released with [`lm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::str::FromStr;

use landmoe::adapter::{argmax_labels, LandMoeModel};
use landmoe::checkpoint::{load_model, save_model};
use landmoe::config::{LandMoeConfig, Profile};
use landmoe::router::Mode;
use landmoe::tensor::Tensor;
use landmoe::train::{train_run, worker_count, TrainConfig};
use landmoe::Error;

/// Status codes. Values are stable.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferSize = 3,
    Shape = 10,
    Degenerate = 11,
    Contract = 12,
    Numerical = 13,
    Config = 14,
    Data = 15,
    Format = 16,
    Io = 17,
    Panic = 99,
}

/// Trainable scalars per parameter group.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LmParamCount {
    pub router: usize,
    pub experts: usize,
    pub shared_mlp: usize,
    pub filter: usize,
    pub head: usize,
    pub total: usize,
}

/// Opaque model handle.
pub struct LmModel {
    inner: LandMoeModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> LmStatus {
    match e {
        Error::Shape(_) => LmStatus::Shape,
        Error::Degenerate(_) => LmStatus::Degenerate,
        Error::Contract(_) => LmStatus::Contract,
        Error::Numerical(_) => LmStatus::Numerical,
        Error::Config(_) => LmStatus::Config,
        Error::Data(_) => LmStatus::Data,
        Error::Format(_) => LmStatus::Format,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => LmStatus::Io,
    }
}

struct Fail(LmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LmStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            LmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(LmStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LmStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn model<'a>(m: *const LmModel) -> Result<&'a LandMoeModel, Fail> {
    m.as_ref().map(|h| &h.inner).ok_or_else(|| null("model"))
}

unsafe fn emit(out: *mut *mut LmModel, inner: LandMoeModel) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(LmModel { inner }));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn lm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Desk-scale model for `profile` ("cross-sensor" or "cross-geospatial").
///
/// # Safety
/// `profile` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_model_new_desk(profile: *const c_char, seed: u64, out: *mut *mut LmModel) -> LmStatus {
    guard(|| {
        let p = Profile::from_str(text(profile, "profile")?)?;
        emit(out, LandMoeModel::new(LandMoeConfig::desk(p), seed)?)
    })
}

/// Model from `key=value` lines over the desk defaults.
///
/// # Safety
/// `config` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_model_from_config(config: *const c_char, seed: u64, out: *mut *mut LmModel) -> LmStatus {
    guard(|| {
        let cfg = LandMoeConfig::from_kv(text(config, "config")?)?;
        emit(out, LandMoeModel::new(cfg, seed)?)
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_model_load(path: *const c_char, out: *mut *mut LmModel) -> LmStatus {
    guard(|| emit(out, load_model(Path::new(text(path, "path")?))?))
}

/// # Safety
/// `model` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lm_model_save(model: *const LmModel, path: *const c_char) -> LmStatus {
    guard(|| {
        save_model(Path::new(text(path, "path")?), self::model(model)?)?;
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lm_model_free(model: *mut LmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected input extents `height × width × channels` and the class count.
///
/// # Safety
/// `model` must be a live handle; every out pointer must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_model_dims(
    model: *const LmModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
    classes: *mut usize,
) -> LmStatus {
    guard(|| {
        let m = self::model(model)?;
        if height.is_null() || width.is_null() || channels.is_null() || classes.is_null() {
            return Err(null("dims output"));
        }
        *height = m.cfg.image_size;
        *width = m.cfg.image_size;
        *channels = m.cfg.channels;
        *classes = m.cfg.num_classes;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_model_param_count(model: *const LmModel, out: *mut LmParamCount) -> LmStatus {
    guard(|| {
        let c = self::model(model)?.count_trainable_params();
        if out.is_null() {
            return Err(null("out"));
        }
        *out = LmParamCount {
            router: c.router,
            experts: c.experts,
            shared_mlp: c.shared_mlp,
            filter: c.filter,
            head: c.head,
            total: c.total(),
        };
        Ok(())
    })
}

unsafe fn image_in(m: &LandMoeModel, image: *const f64, len: usize) -> Result<Tensor, Fail> {
    if image.is_null() {
        return Err(null("image"));
    }
    let (s, c) = (m.cfg.image_size, m.cfg.channels);
    if len != s * s * c {
        return Err(Fail(LmStatus::Shape, format!("image has {len} values, expected {s}×{s}×{c}")));
    }
    Ok(Tensor::new(&[s, s, c], std::slice::from_raw_parts(image, len).to_vec())?)
}

/// Eval-mode pixel logits, row-major `H×W×K`.
///
/// # Safety
/// `image` must hold `image_len` doubles (row-major `H×W×C`); `logits`
/// must hold `logits_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lm_model_predict(
    model: *const LmModel,
    image: *const f64,
    image_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> LmStatus {
    guard(|| {
        let m = self::model(model)?;
        let x = image_in(m, image, image_len)?;
        let need = m.cfg.image_size * m.cfg.image_size * m.cfg.num_classes;
        if logits.is_null() {
            return Err(null("logits"));
        }
        if logits_len != need {
            return Err(Fail(LmStatus::BufferSize, format!("logits buffer holds {logits_len}, need {need}")));
        }
        let y = m.predict(&x, Mode::Eval, 0)?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(y.data());
        Ok(())
    })
}

/// Eval-mode label map, row-major `H×W`.
///
/// # Safety
/// `image` must hold `image_len` doubles; `labels` must hold `labels_len` values.
#[no_mangle]
pub unsafe extern "C" fn lm_model_segment(
    model: *const LmModel,
    image: *const f64,
    image_len: usize,
    labels: *mut u32,
    labels_len: usize,
) -> LmStatus {
    guard(|| {
        let m = self::model(model)?;
        let x = image_in(m, image, image_len)?;
        let need = m.cfg.image_size * m.cfg.image_size;
        if labels.is_null() {
            return Err(null("labels"));
        }
        if labels_len != need {
            return Err(Fail(LmStatus::BufferSize, format!("labels buffer holds {labels_len}, need {need}")));
        }
        let y = m.predict(&x, Mode::Eval, 0)?;
        let out = std::slice::from_raw_parts_mut(labels, need);
        for (o, l) in out.iter_mut().zip(argmax_labels(&y)) {
            *o = l as u32;
        }
        Ok(())
    })
}

/// Runs training from `key=value` settings over the desk defaults and
/// returns the best checkpoint's model. `out_dir` may be NULL to skip
/// writing files; `best_miou` may be NULL.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_train(
    config: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut LmModel,
    best_miou: *mut f64,
) -> LmStatus {
    guard(|| {
        let cfg = TrainConfig::from_kv(text(config, "config")?)?;
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(Path::new(text(out_dir, "out_dir")?))
        };
        if out.is_null() {
            return Err(null("out"));
        }
        let report = train_run(&cfg, dir, worker_count())?;
        if !best_miou.is_null() {
            *best_miou = report.best_miou;
        }
        emit(out, report.best_model)
    })
}
