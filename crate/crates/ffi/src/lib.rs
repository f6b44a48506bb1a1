//! C interface to the ntg texture-transfer core.
//!
//! Every entry point returns an [`NtgStatus`]; on failure the message is kept
//! per thread and can be read with [`ntg_last_error_message`]. Objects are
//! opaque handles owned by the caller and released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ntg_core::featnet::FeatureExtractor;
use ntg_core::formats::{read_ntx1, read_pgm, write_pgm};
use ntg_core::generator::{GeneratorConfig, GeneratorNet};
use ntg_core::matchswap::{swap_features, swap_pyramid, MatchOptions, ReferencePyramids};
use ntg_core::metrics::evaluate_pair;
use ntg_core::trainer::{TextureMode, GENERATOR_PREFIX};
use ntg_core::{Error, Grid};

/// Result code of every `ntg_*` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NtgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    NonFinite = 6,
    Panic = 7,
}

/// Which pyramid levels receive swapped texture during synthesis.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NtgTextureMode {
    Full = 0,
    SingleScale = 1,
    None = 2,
}

impl From<NtgTextureMode> for TextureMode {
    fn from(m: NtgTextureMode) -> Self {
        match m {
            NtgTextureMode::Full => TextureMode::Full,
            NtgTextureMode::SingleScale => TextureMode::SingleScale,
            NtgTextureMode::None => TextureMode::None,
        }
    }
}

/// Image quality of one output against its target, on 8-bit exports.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NtgMetrics {
    pub ssim: f64,
    pub mse: f64,
    /// Infinite when the images are identical.
    pub psnr: f64,
    pub histcorr: f64,
}

/// Channels × height × width array of doubles.
pub struct NtgGrid(Grid);

/// Feature extractor plus generator.
pub struct NtgModel {
    extractor: FeatureExtractor,
    generator: GeneratorNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> NtgStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::LevelMismatch { .. } => NtgStatus::ShapeMismatch,
        Error::Io { .. } => NtgStatus::Io,
        Error::Pgm(_) | Error::Ntx1(_) | Error::MissingSection(_) | Error::Config(_) => NtgStatus::Format,
        Error::NonFinite(_) | Error::NonScalarLoss(_) | Error::GradCheck { .. } => NtgStatus::NonFinite,
        _ => NtgStatus::InvalidArgument,
    }
}

struct Fail(NtgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NtgStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(NtgStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NtgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NtgStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            NtgStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn grid_arg<'a>(g: *const NtgGrid, what: &str) -> Result<&'a Grid, Fail> {
    g.as_ref().map(|g| &g.0).ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next `ntg_*` call on the same thread.
#[no_mangle]
pub extern "C" fn ntg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ntg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `channels * height * width` doubles from `data` into a new grid.
/// A NULL `data` gives a zero-filled grid.
///
/// # Safety
/// `data` must be NULL or point to that many doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntg_grid_new(
    channels: usize,
    height: usize,
    width: usize,
    data: *const f64,
    out: *mut *mut NtgGrid,
) -> NtgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(invalid(format!("empty grid {channels}x{height}x{width}")));
        }
        let n = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| invalid("grid size overflows"))?;
        let g = if data.is_null() {
            Grid::zeros(channels, height, width)
        } else {
            Grid::from_vec(channels, height, width, std::slice::from_raw_parts(data, n).to_vec())?
        };
        put(out, NtgGrid(g));
        Ok(())
    })
}

/// # Safety
/// `grid` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ntg_grid_free(grid: *mut NtgGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// # Safety
/// `grid` must be a live handle; the out pointers may be NULL.
#[no_mangle]
pub unsafe extern "C" fn ntg_grid_shape(
    grid: *const NtgGrid,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> NtgStatus {
    guard(|| {
        let g = grid_arg(grid, "grid")?;
        for (p, v) in [(channels, g.channels()), (height, g.height()), (width, g.width())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Borrowed pointer to the channel-major data, valid while `grid` lives.
/// NULL when `grid` is NULL.
///
/// # Safety
/// `grid` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ntg_grid_data(grid: *const NtgGrid) -> *const f64 {
    grid.as_ref().map_or(ptr::null(), |g| g.0.as_slice().as_ptr())
}

/// Reads a binary PGM (P5) as a one-channel grid in [0, 1].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntg_grid_read_pgm(path: *const c_char, out: *mut *mut NtgGrid) -> NtgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = read_pgm(path_arg(path, "path")?)?;
        put(out, NtgGrid(g));
        Ok(())
    })
}

/// # Safety
/// `grid` must be a live one-channel handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ntg_grid_write_pgm(grid: *const NtgGrid, path: *const c_char) -> NtgStatus {
    guard(|| {
        let g = grid_arg(grid, "grid")?;
        write_pgm(g, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Loads extractor and generator sections from an NTX1 weight file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntg_model_load(path: *const c_char, out: *mut *mut NtgModel) -> NtgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let map = read_ntx1(path_arg(path, "path")?)?;
        let model = NtgModel {
            extractor: FeatureExtractor::import(&map)?,
            generator: GeneratorNet::import(GENERATOR_PREFIX, &map)?,
        };
        if model.extractor.levels() != model.generator.levels() {
            return Err(Fail(
                NtgStatus::ShapeMismatch,
                format!(
                    "extractor has {} levels but the generator has {}",
                    model.extractor.levels(),
                    model.generator.levels()
                ),
            ));
        }
        put(out, model);
        Ok(())
    })
}

/// Untrained model with seeded weights for one-channel images.
/// `scale` is 1 (translation) or 2 (super-resolution).
///
/// # Safety
/// `plan` must point to `plan_len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntg_model_seeded(
    seed: u64,
    plan: *const usize,
    plan_len: usize,
    scale: usize,
    out: *mut *mut NtgModel,
) -> NtgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if plan.is_null() {
            return Err(null("plan"));
        }
        let plan = std::slice::from_raw_parts(plan, plan_len);
        if plan.is_empty() || plan.contains(&0) {
            return Err(invalid("channel plan needs positive channel counts"));
        }
        if !matches!(scale, 1 | 2) {
            return Err(invalid(format!("scale must be 1 or 2, got {scale}")));
        }
        let model = NtgModel {
            extractor: FeatureExtractor::seeded(seed, 1, plan)?,
            generator: GeneratorNet::seeded(seed.wrapping_add(1), GeneratorConfig::new(plan, scale))?,
        };
        put(out, model);
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ntg_model_free(model: *mut NtgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of pyramid levels of the model.
///
/// # Safety
/// `model` must be a live handle; `levels` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntg_model_levels(model: *const NtgModel, levels: *mut usize) -> NtgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *levels.as_mut().ok_or_else(|| null("levels"))? = m.generator.levels();
        Ok(())
    })
}

/// Translates `input` using texture matched from `refs` (3×3 patches,
/// references blurred by `blur_factor`). `refs` may be NULL when `mode`
/// is `NTG_TEXTURE_MODE_NONE`.
///
/// # Safety
/// `model` and `input` must be live handles, `refs` must point to `n_refs`
/// live grid handles, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntg_synthesize(
    model: *const NtgModel,
    input: *const NtgGrid,
    refs: *const *const NtgGrid,
    n_refs: usize,
    mode: NtgTextureMode,
    blur_factor: f64,
    out: *mut *mut NtgGrid,
) -> NtgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let input = grid_arg(input, "input")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let levels = TextureMode::from(mode).levels(m.generator.levels());
        let swaps = if levels.is_empty() {
            vec![]
        } else {
            if refs.is_null() || n_refs == 0 {
                return Err(invalid("texture modes need at least one reference"));
            }
            let pyramids = std::slice::from_raw_parts(refs, n_refs)
                .iter()
                .map(|&r| ReferencePyramids::new(&m.extractor, grid_arg(r, "reference")?, blur_factor).map_err(Fail::from))
                .collect::<Result<Vec<_>, Fail>>()?;
            let pyramids: Vec<&ReferencePyramids> = pyramids.iter().collect();
            swap_pyramid(&m.extractor.extract_pyramid(input)?, &pyramids, &levels, &MatchOptions::default())?
        };
        let g = m.generator.generate(input, &swaps)?;
        if !g.is_finite() {
            return Err(Error::NonFinite("synthesized image".into()).into());
        }
        put(out, NtgGrid(g));
        Ok(())
    })
}

/// Replaces every `patch_size` patch of `input_features` with the raw
/// reference patch whose blurred counterpart matches best. The result has
/// the shape of `input_features`.
///
/// # Safety
/// Grid arguments must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntg_swap_features(
    input_features: *const NtgGrid,
    ref_raw: *const NtgGrid,
    ref_blur: *const NtgGrid,
    patch_size: usize,
    out: *mut *mut NtgGrid,
) -> NtgStatus {
    guard(|| {
        let input = grid_arg(input_features, "input_features")?;
        let raw = grid_arg(ref_raw, "ref_raw")?;
        let blur = grid_arg(ref_blur, "ref_blur")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if patch_size == 0 {
            return Err(invalid("patch_size must be positive"));
        }
        let r = swap_features(input, raw, blur, patch_size)?;
        put(out, NtgGrid(r.swapped));
        Ok(())
    })
}

/// SSIM, MSE, PSNR and histogram correlation of `output` against `target`.
///
/// # Safety
/// Grid arguments must be live handles; `metrics` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntg_evaluate(
    output: *const NtgGrid,
    target: *const NtgGrid,
    metrics: *mut NtgMetrics,
) -> NtgStatus {
    guard(|| {
        let o = grid_arg(output, "output")?;
        let t = grid_arg(target, "target")?;
        let m = metrics.as_mut().ok_or_else(|| null("metrics"))?;
        let r = evaluate_pair("", o, t)?;
        *m = NtgMetrics {
            ssim: r.ssim,
            mse: r.mse,
            psnr: r.psnr,
            histcorr: r.histcorr,
        };
        Ok(())
    })
}
