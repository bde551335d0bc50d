//! C ABI over `diffpose`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns a [`DpStatus`] and,
//! on failure, stores a message retrievable with [`dp_last_error`] on the
//! same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use diffpose::diffusion::{DiffusionSchedule, ScheduleKind};
use diffpose::model::{self, DenoiserParams, ModelConfig};
use diffpose::numerics::Tensor;
use diffpose::pipeline::{self, InferMode, InferOptions, LossTarget};
use diffpose::priors::{self, SemanticPrior};
use diffpose::rng::Rng;
use diffpose::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Validation = 5,
    Numeric = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpInferMode {
    Literal = 0,
    Ddim = 1,
}

/// Noise schedule handle.
pub struct DpSchedule {
    inner: DiffusionSchedule,
}

/// Trained denoiser with its schedule, prior and inference options.
pub struct DpModel {
    params: DenoiserParams,
    config: ModelConfig,
    sched: DiffusionSchedule,
    prior: SemanticPrior,
    target: LossTarget,
    vis_threshold: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DpStatus {
    match e {
        Error::Io { .. } => DpStatus::Io,
        Error::Format { .. } | Error::Json { .. } => DpStatus::Format,
        Error::Numeric(_) => DpStatus::Numeric,
        Error::Config(_) => DpStatus::InvalidArgument,
        _ => DpStatus::Validation,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DpStatus, String)>) -> DpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DpStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DpStatus, String) {
    (DpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (DpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (DpStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn dp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Linear schedule of `steps` betas from `beta_start` to `beta_end`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dp_schedule_new(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut DpSchedule,
) -> DpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = DiffusionSchedule::new(steps, beta_start, beta_end, ScheduleKind::Linear)
            .map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(DpSchedule { inner })) };
        Ok(())
    })
}

/// Cumulative signal fraction after `t` steps; `t = 0` gives 1.
///
/// # Safety
/// `sched` must come from [`dp_schedule_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_schedule_alpha_bar(
    sched: *const DpSchedule,
    t: usize,
    out: *mut f64,
) -> DpStatus {
    guard(|| {
        let sched = unsafe { sched.as_ref() }.ok_or_else(|| null("sched"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if t > sched.inner.steps() {
            return Err((
                DpStatus::InvalidArgument,
                format!("t = {t} exceeds schedule length {}", sched.inner.steps()),
            ));
        }
        unsafe { *out = sched.inner.alpha_bar(t) };
        Ok(())
    })
}

/// # Safety
/// `sched` must be null or a handle from [`dp_schedule_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dp_schedule_free(sched: *mut DpSchedule) {
    if !sched.is_null() {
        drop(unsafe { Box::from_raw(sched) });
    }
}

/// Load a training checkpoint and an embedding file.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dp_model_load(
    checkpoint_path: *const c_char,
    embeddings_path: *const c_char,
    out: *mut *mut DpModel,
) -> DpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = unsafe { path_arg(checkpoint_path, "checkpoint_path") }?;
        let emb = unsafe { path_arg(embeddings_path, "embeddings_path") }?;
        let trainer = pipeline::load_checkpoint(&ckpt).map_err(lib_err)?;
        let prior = priors::load_embeddings(&emb).map_err(lib_err)?;
        model::check_prior(&prior, &trainer.model).map_err(lib_err)?;
        let handle = DpModel {
            params: trainer.params,
            config: trainer.model,
            sched: trainer.sched,
            prior,
            target: trainer.cfg.loss_target,
            vis_threshold: trainer.cfg.vis_threshold,
        };
        unsafe { *out = Box::into_raw(Box::new(handle)) };
        Ok(())
    })
}

/// Keypoint count, input image height and width of a loaded model.
///
/// # Safety
/// `m` must be a live model handle; each out pointer must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn dp_model_dims(
    m: *const DpModel,
    num_keypoints: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> DpStatus {
    guard(|| {
        let m = unsafe { m.as_ref() }.ok_or_else(|| null("model"))?;
        let (h, w) = m.config.image_size();
        unsafe {
            if let Some(p) = num_keypoints.as_mut() {
                *p = m.config.num_keypoints;
            }
            if let Some(p) = height.as_mut() {
                *p = h;
            }
            if let Some(p) = width.as_mut() {
                *p = w;
            }
        }
        Ok(())
    })
}

/// Estimate keypoints for one `[3, H, W]` image with channel-major values in `[0, 1]`.
///
/// Writes `x, y` pairs to `coords` (length `2N`) and visibility flags to `visibility` (length `N`).
///
/// # Safety
/// `image` must hold `image_len` values; `coords` and `visibility` must have room for the outputs.
#[no_mangle]
pub unsafe extern "C" fn dp_model_infer(
    m: *const DpModel,
    image: *const f64,
    image_len: usize,
    mode: DpInferMode,
    seed: u64,
    coords: *mut f64,
    visibility: *mut u8,
) -> DpStatus {
    guard(|| {
        let m = unsafe { m.as_ref() }.ok_or_else(|| null("model"))?;
        if image.is_null() || coords.is_null() || visibility.is_null() {
            return Err(null("image, coords or visibility"));
        }
        let (h, w) = m.config.image_size();
        if image_len != 3 * h * w {
            return Err((
                DpStatus::InvalidArgument,
                format!(
                    "image_len {image_len} but the model expects 3*{h}*{w} = {}",
                    3 * h * w
                ),
            ));
        }
        let pixels = unsafe { std::slice::from_raw_parts(image, image_len) }.to_vec();
        let tensor = Tensor::new(&[3, h, w], pixels).map_err(lib_err)?;
        let opts = InferOptions {
            mode: match mode {
                DpInferMode::Literal => InferMode::Literal,
                DpInferMode::Ddim => InferMode::Ddim,
            },
            target: m.target,
            vis_threshold: m.vis_threshold,
        };
        let res = pipeline::infer(
            &tensor,
            &m.params,
            &m.config,
            &m.sched,
            &m.prior,
            &opts,
            &mut Rng::seed_from(seed),
        )
        .map_err(lib_err)?;
        let n = m.config.num_keypoints;
        let (xy, vis) = unsafe {
            (
                std::slice::from_raw_parts_mut(coords, 2 * n),
                std::slice::from_raw_parts_mut(visibility, n),
            )
        };
        for (i, c) in res.keypoints.coords.iter().enumerate() {
            xy[2 * i] = c[0];
            xy[2 * i + 1] = c[1];
            vis[i] = res.keypoints.visibility[i];
        }
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from [`dp_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dp_model_free(m: *mut DpModel) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}
