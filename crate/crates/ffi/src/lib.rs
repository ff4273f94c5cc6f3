//! C ABI over the tridiff library.
//!
//! Objects are opaque heap handles released with their `*_free` function.
//! Every fallible call returns a [`TdStatus`]; the message of the most recent
//! failure on the calling thread is available from [`td_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use tridiff::denoiser::DenoiserModel;
use tridiff::pipeline::{load_checkpoint, repose, ReposeSettings};
use tridiff::renderer::{self, RenderConfig, View};
use tridiff::skeleton::{encode_skeleton, RasterParams, Skeleton, WorldBounds};
use tridiff::triplane::Triplane;
use tridiff::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TdStatus {
    Ok = 0,
    InvalidArgument = 1,
    Format = 2,
    Numeric = 3,
    Io = 4,
    NullPointer = 5,
    Panic = 6,
}

pub struct TdSkeleton {
    inner: Skeleton,
}

pub struct TdTriplane {
    inner: Triplane,
}

pub struct TdModel {
    model: DenoiserModel,
    settings: ReposeSettings,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TdStatus {
    match e {
        Error::InvalidArgument(_) | Error::Shape(_) => TdStatus::InvalidArgument,
        Error::InvalidData(_) | Error::Format(_) | Error::Json(_) => TdStatus::Format,
        Error::Numeric(_) => TdStatus::Numeric,
        Error::Io(_) => TdStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TdStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {}", what));
            TdStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            TdStatus::InvalidArgument
        }
        Err(_) => {
            set_error("internal panic".into());
            TdStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{} is not UTF-8", what)))
}

unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<T>(slot: *mut *mut T, value: T, what: &'static str) -> Result<(), Fail> {
    if slot.is_null() {
        return Err(Fail::Null(what));
    }
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn td_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn td_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Load a skeleton from a JSON file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn td_skeleton_load(path: *const c_char, out_skeleton: *mut *mut TdSkeleton) -> TdStatus {
    guard(|| {
        let p = cstr(path, "path")?;
        out(out_skeleton, TdSkeleton { inner: Skeleton::load(&PathBuf::from(p))? }, "out_skeleton")
    })
}

/// Build a skeleton from `num_joints` xyz triples and `num_bones` index pairs.
///
/// # Safety
/// `joints` must hold `3 * num_joints` doubles and `bones` `2 * num_bones` values.
#[no_mangle]
pub unsafe extern "C" fn td_skeleton_new(
    joints: *const f64,
    num_joints: usize,
    bones: *const u32,
    num_bones: usize,
    out_skeleton: *mut *mut TdSkeleton,
) -> TdStatus {
    guard(|| {
        if joints.is_null() || (bones.is_null() && num_bones > 0) {
            return Err(Fail::Null("joints or bones"));
        }
        let j = std::slice::from_raw_parts(joints, 3 * num_joints);
        let b = if num_bones == 0 { &[][..] } else { std::slice::from_raw_parts(bones, 2 * num_bones) };
        let joints = j.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let bones = b.chunks_exact(2).map(|c| (c[0] as usize, c[1] as usize)).collect();
        out(out_skeleton, TdSkeleton { inner: Skeleton::new(joints, bones)? }, "out_skeleton")
    })
}

/// # Safety
/// `skeleton` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn td_skeleton_free(skeleton: *mut TdSkeleton) {
    if !skeleton.is_null() {
        drop(Box::from_raw(skeleton));
    }
}

/// Rasterize a skeleton at `size x size` over the default `[-1, 1]^3` bounds
/// into an encoding triplane with `channels` channels per field.
///
/// # Safety
/// Pointers must be valid handles / writable slots.
#[no_mangle]
pub unsafe extern "C" fn td_encode_skeleton(
    skeleton: *const TdSkeleton,
    size: usize,
    channels: usize,
    out_triplane: *mut *mut TdTriplane,
) -> TdStatus {
    guard(|| {
        let s = obj(skeleton, "skeleton")?;
        let bounds = WorldBounds::default();
        let enc = encode_skeleton(&s.inner, &bounds, size, size, RasterParams::for_resolution(size))?;
        out(out_triplane, TdTriplane { inner: Triplane::from_encoding(&enc, channels, bounds)? }, "out_triplane")
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out_triplane` writable.
#[no_mangle]
pub unsafe extern "C" fn td_triplane_load(path: *const c_char, out_triplane: *mut *mut TdTriplane) -> TdStatus {
    guard(|| {
        let p = cstr(path, "path")?;
        out(out_triplane, TdTriplane { inner: Triplane::load(&PathBuf::from(p))? }, "out_triplane")
    })
}

/// # Safety
/// `triplane` must be a valid handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn td_triplane_save(triplane: *const TdTriplane, path: *const c_char) -> TdStatus {
    guard(|| {
        let t = obj(triplane, "triplane")?;
        t.inner.save(&PathBuf::from(cstr(path, "path")?))?;
        Ok(())
    })
}

/// Channels per field, height and width.
///
/// # Safety
/// `triplane` must be a valid handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn td_triplane_dims(triplane: *const TdTriplane, channels: *mut usize, height: *mut usize, width: *mut usize) -> TdStatus {
    guard(|| {
        let t = &obj(triplane, "triplane")?.inner;
        for (slot, v) in [(channels, t.channels()), (height, t.height()), (width, t.width())] {
            if !slot.is_null() {
                *slot = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `triplane` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn td_triplane_free(triplane: *mut TdTriplane) {
    if !triplane.is_null() {
        drop(Box::from_raw(triplane));
    }
}

/// Load a checkpoint directory written by training.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn td_model_load(dir: *const c_char, out_model: *mut *mut TdModel) -> TdStatus {
    guard(|| {
        let (model, settings) = load_checkpoint(&PathBuf::from(cstr(dir, "dir")?))?;
        out(out_model, TdModel { model, settings }, "out_model")
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn td_model_free(model: *mut TdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Generate the init character in the target pose.
///
/// # Safety
/// All handles must be valid and `out_triplane` writable.
#[no_mangle]
pub unsafe extern "C" fn td_repose(
    model: *const TdModel,
    init: *const TdTriplane,
    target: *const TdSkeleton,
    seed: u64,
    out_triplane: *mut *mut TdTriplane,
) -> TdStatus {
    guard(|| {
        let m = obj(model, "model")?;
        let t = repose(&m.model, &obj(init, "init")?.inner, &obj(target, "target")?.inner, &m.settings, seed)?;
        out(out_triplane, TdTriplane { inner: t }, "out_triplane")
    })
}

/// Render with the analytic decoder. `view` is `+x`, `-x`, `+y`, `-y`, `+z`,
/// `-z` or `azimuth,elevation` in degrees. `rgb` receives `3 * size * size`
/// floats and `alpha` `size * size` floats, row-major from the top-left;
/// either may be null.
///
/// # Safety
/// Buffers, when non-null, must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn td_render(
    triplane: *const TdTriplane,
    view: *const c_char,
    size: usize,
    samples: usize,
    density_scale: f64,
    rgb: *mut f32,
    alpha: *mut f32,
) -> TdStatus {
    guard(|| {
        let t = obj(triplane, "triplane")?;
        let view: View = cstr(view, "view")?.parse()?;
        let cfg = RenderConfig { size, view, samples, density_scale, ..Default::default() };
        let img = renderer::render(&t.inner, &cfg)?;
        if !rgb.is_null() {
            let dst = std::slice::from_raw_parts_mut(rgb, img.rgb.len());
            dst.iter_mut().zip(&img.rgb).for_each(|(d, &s)| *d = s as f32);
        }
        if !alpha.is_null() {
            let dst = std::slice::from_raw_parts_mut(alpha, img.alpha.len());
            dst.iter_mut().zip(&img.alpha).for_each(|(d, &s)| *d = s as f32);
        }
        Ok(())
    })
}

/// Render with the analytic decoder and write a binary PPM.
///
/// # Safety
/// `triplane` must be valid; strings nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn td_render_ppm(
    triplane: *const TdTriplane,
    view: *const c_char,
    size: usize,
    samples: usize,
    density_scale: f64,
    path: *const c_char,
) -> TdStatus {
    guard(|| {
        let t = obj(triplane, "triplane")?;
        let view: View = cstr(view, "view")?.parse()?;
        let cfg = RenderConfig { size, view, samples, density_scale, ..Default::default() };
        let img = renderer::render(&t.inner, &cfg)?;
        renderer::write_ppm(&img, &PathBuf::from(cstr(path, "path")?))?;
        Ok(())
    })
}
