//! C ABI over `wwt-core`.
//!
//! Every function returns a [`WwtStatus`]; on failure the message of the
//! most recent error on the calling thread is available from
//! [`wwt_last_error`]. Models are opaque handles created by `wwt_model_new`
//! or `wwt_model_load` and released with `wwt_model_free`. Images are passed
//! as row-major RGB `float` triples in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use wwt_core::checkpoint;
use wwt_core::error::WwtError;
use wwt_core::heads::{discover_regions, select_single_object, DiscoveryParams};
use wwt_core::image::Image;
use wwt_core::model::{WwtConfig, WwtParams};
use wwt_core::train::{infer, RunConfig};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WwtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Config = 5,
    Checkpoint = 6,
    Parse = 7,
    Data = 8,
    Io = 9,
    Diverged = 10,
    Backward = 11,
    /// The library panicked; the handle involved should not be reused.
    Internal = 12,
    /// A nonempty result did not exist (for example no region was found).
    NotFound = 13,
}

/// Opaque model: configuration plus parameters.
pub struct WwtModel {
    config: WwtConfig,
    params: WwtParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &WwtError) -> WwtStatus {
    match e {
        WwtError::Shape { .. } => WwtStatus::Shape,
        WwtError::InvalidArgument { .. } => WwtStatus::InvalidArgument,
        WwtError::NonFinite { .. } => WwtStatus::NonFinite,
        WwtError::Backward(_) => WwtStatus::Backward,
        WwtError::Config(_) => WwtStatus::Config,
        WwtError::Checkpoint(_) => WwtStatus::Checkpoint,
        WwtError::Parse { .. } => WwtStatus::Parse,
        WwtError::Data(_) => WwtStatus::Data,
        WwtError::Diverged { .. } => WwtStatus::Diverged,
        WwtError::Io { .. } => WwtStatus::Io,
    }
}

struct Fail(WwtStatus, String);

impl From<WwtError> for Fail {
    fn from(e: WwtError) -> Self {
        Fail(status_of(&e), format!("{}: {e}", e.class()))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WwtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WwtStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal: panic inside the library");
            WwtStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(
        WwtStatus::NullPointer,
        format!("null_pointer: {what} is null"),
    )
}

unsafe fn model_ref<'a>(m: *const WwtModel) -> Result<&'a WwtModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            WwtStatus::InvalidArgument,
            format!("invalid_argument: {what} is not UTF-8"),
        )
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn image_arg(model: &WwtModel, rgb: *const f32, len: usize) -> Result<Image, Fail> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    let n = model.config.image_size;
    if len != n * n * 3 {
        return Err(Fail(
            WwtStatus::Shape,
            format!(
                "shape: expected {} floats for a {n}x{n} RGB image, got {len}",
                n * n * 3
            ),
        ));
    }
    Ok(Image::new(
        n,
        n,
        std::slice::from_raw_parts(rgb, len).to_vec(),
    )?)
}

unsafe fn out_slice<'a>(
    out: *mut f64,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [f64], Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail(
            WwtStatus::Shape,
            format!("shape: {what} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(out, need))
}

/// Message of the last failure on this thread, or an empty string. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wwt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wwt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Freshly initialized reference model for `num_classes` classes.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn wwt_model_new(
    num_classes: u32,
    seed: u64,
    out: *mut *mut WwtModel,
) -> WwtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = WwtConfig::micro(num_classes as usize);
        config.validate()?;
        let params = WwtParams::init(&config, seed)?;
        *out = Box::into_raw(Box::new(WwtModel { config, params }));
        Ok(())
    })
}

/// Load a checkpoint. `config_path` names a run config file; pass null for
/// the reference configuration.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wwt_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut WwtModel,
) -> WwtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let rc = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_file(&path_arg(config_path, "config_path")?)?
        };
        let params = checkpoint::load(&path_arg(checkpoint_path, "checkpoint_path")?)?;
        params.check_against(&rc.model)?;
        *out = Box::into_raw(Box::new(WwtModel {
            config: rc.model,
            params,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wwt_model_save(model: *const WwtModel, path: *const c_char) -> WwtStatus {
    guard(|| {
        let m = model_ref(model)?;
        checkpoint::save(&path_arg(path, "path")?, &m.params)?;
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wwt_model_free(model: *mut WwtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image side, slot count and class count of a model.
///
/// # Safety
/// `model` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn wwt_model_dims(
    model: *const WwtModel,
    image_size: *mut u32,
    slots: *mut u32,
    num_classes: *mut u32,
) -> WwtStatus {
    guard(|| {
        let m = model_ref(model)?;
        for (p, v) in [
            (image_size, m.config.image_size),
            (slots, m.config.slots),
            (num_classes, m.config.num_classes),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v as u32;
            }
        }
        Ok(())
    })
}

/// Image-level class probabilities written to `probs[0..num_classes]`.
///
/// # Safety
/// `rgb` must hold `rgb_len` floats and `probs` `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wwt_classify(
    model: *const WwtModel,
    rgb: *const f32,
    rgb_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> WwtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = image_arg(m, rgb, rgb_len)?;
        let out = out_slice(probs, probs_len, m.config.num_classes, "probs")?;
        let inf = infer(&m.config, &m.params, &img)?;
        out.copy_from_slice(&inf.logits.image_probs());
        Ok(())
    })
}

/// Head-averaged slot masks, row-major `[tokens][slots]`.
///
/// # Safety
/// `rgb` must hold `rgb_len` floats and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wwt_slot_masks(
    model: *const WwtModel,
    rgb: *const f32,
    rgb_len: usize,
    out: *mut f64,
    out_len: usize,
) -> WwtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = image_arg(m, rgb, rgb_len)?;
        let need = m.config.tokens() * m.config.slots;
        let dst = out_slice(out, out_len, need, "out")?;
        let inf = infer(&m.config, &m.params, &img)?;
        dst.copy_from_slice(&inf.mean_mask.to_f64_vec());
        Ok(())
    })
}

/// Single-object discovery: the most concentrated region's pixel box
/// `[x0, y0, x1, y1]` (half-open). Returns `NotFound` when no region
/// survives thresholding.
///
/// # Safety
/// `rgb` must hold `rgb_len` floats and `box_out` four doubles.
#[no_mangle]
pub unsafe extern "C" fn wwt_discover(
    model: *const WwtModel,
    rgb: *const f32,
    rgb_len: usize,
    threshold: f64,
    box_out: *mut f64,
) -> WwtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = image_arg(m, rgb, rgb_len)?;
        let dst = out_slice(box_out, 4, 4, "box_out")?;
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Fail(
                WwtStatus::InvalidArgument,
                "invalid_argument: threshold must lie in (0, 1)".into(),
            ));
        }
        let inf = infer(&m.config, &m.params, &img)?;
        let dp = DiscoveryParams {
            threshold,
            ..Default::default()
        };
        let props = discover_regions(&inf.masks, m.config.grid(), &dp)?;
        if props.is_empty() {
            return Err(Fail(
                WwtStatus::NotFound,
                "not_found: no region above the threshold".into(),
            ));
        }
        let b = select_single_object(&props)?.pixel_box(m.config.patch_size);
        dst.copy_from_slice(&[b.x0, b.y0, b.x1, b.y1]);
        Ok(())
    })
}
