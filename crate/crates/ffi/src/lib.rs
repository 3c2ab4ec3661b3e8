//! C ABI over the reconstruction engine.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `fsp_*_new`/`fsp_*_load` call and released by the matching `fsp_*_free`.
//! Fallible calls return an [`FspStatus`]; the message of the most recent
//! failure on the calling thread is available from [`fsp_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fragsplat::config::RunConfig;
use fragsplat::geometry::{CameraIntrinsics, Pose};
use fragsplat::pipeline::{self, PipelineError, RunOutput};
use fragsplat::registration::required_pairs;
use fragsplat::render::render;
use fragsplat::splat::GaussianSet;
use nalgebra::Vector3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FspStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    Panic = 6,
}

/// Run settings; see the `key = value` config keys.
pub struct FspConfig(RunConfig);

/// A finished reconstruction with its holdout scores.
pub struct FspReconstruction(RunOutput);

pub struct FspGaussianSet(GaussianSet);

/// Camera model: focal lengths and principal point in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FspCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// World-to-camera pose: translation then unit quaternion (x, y, z, w).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FspPose {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: FspStatus, msg: &str) -> FspStatus {
    set_error(msg);
    status
}

fn from_pipeline(e: &PipelineError) -> FspStatus {
    let status = match e.exit_code() {
        2 => FspStatus::Config,
        3 => FspStatus::Data,
        _ => FspStatus::Numerical,
    };
    fail(status, &e.to_string())
}

fn guard<F: FnOnce() -> FspStatus>(f: F) -> FspStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(FspStatus::Panic, "internal panic"))
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, FspStatus> {
    if p.is_null() {
        return Err(fail(FspStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FspStatus::InvalidArgument, "string is not UTF-8"))
}

fn to_pose(p: &FspPose) -> Pose {
    let [x, y, z, w] = p.rotation;
    let [tx, ty, tz] = p.translation;
    Pose::from_quaternion(w, x, y, z, Vector3::new(tx, ty, tz))
}

fn from_pose(p: &Pose) -> FspPose {
    let q = p.rotation().quaternion();
    let t = p.translation();
    FspPose {
        translation: [t.x, t.y, t.z],
        rotation: [q.i, q.j, q.k, q.w],
    }
}

/// Message of the last failure on this thread, empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fsp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fsp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New config holding the defaults.
#[no_mangle]
pub extern "C" fn fsp_config_new() -> *mut FspConfig {
    Box::into_raw(Box::new(FspConfig(RunConfig::default())))
}

/// # Safety
/// `cfg` must come from [`fsp_config_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fsp_config_free(cfg: *mut FspConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Sets one key, exactly as a config file line would.
///
/// # Safety
/// `cfg` must be a live config handle; `key` and `value` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fsp_config_set(
    cfg: *mut FspConfig,
    key: *const c_char,
    value: *const c_char,
) -> FspStatus {
    guard(|| {
        let Some(cfg) = cfg.as_mut() else {
            return fail(FspStatus::NullPointer, "null config");
        };
        let (key, value) = match (str_arg(key), str_arg(value)) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match cfg.0.set(key, value).and_then(|_| cfg.0.validate()) {
            Ok(()) => FspStatus::Ok,
            Err(e) => fail(FspStatus::Config, &e.to_string()),
        }
    })
}

/// Loads a `key = value` file into a new config.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_config_load(path: *const c_char, out: *mut *mut FspConfig) -> FspStatus {
    guard(|| {
        if out.is_null() {
            return fail(FspStatus::NullPointer, "null output");
        }
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match RunConfig::load(Path::new(path)) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(FspConfig(c)));
                FspStatus::Ok
            }
            Err(e) => fail(FspStatus::Config, &e.to_string()),
        }
    })
}

/// Runs the full pipeline on the config's `frames`, `bundle` and `out`
/// paths and writes the run directory.
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_reconstruct(
    cfg: *const FspConfig,
    out: *mut *mut FspReconstruction,
) -> FspStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(FspStatus::NullPointer, "null config");
        };
        if out.is_null() {
            return fail(FspStatus::NullPointer, "null output");
        }
        match pipeline::run(&cfg.0) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(FspReconstruction(r)));
                FspStatus::Ok
            }
            Err(e) => from_pipeline(&e),
        }
    })
}

/// # Safety
/// `rec` must come from [`fsp_reconstruct`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fsp_reconstruction_free(rec: *mut FspReconstruction) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// Number of frames in the recovered trajectory; 0 for a null handle.
///
/// # Safety
/// `rec` must be null or a live reconstruction handle.
#[no_mangle]
pub unsafe extern "C" fn fsp_reconstruction_frame_count(rec: *const FspReconstruction) -> usize {
    rec.as_ref().map_or(0, |r| r.0.reconstruction.trajectory.len())
}

/// Number of Gaussians in the merged scene; 0 for a null handle.
///
/// # Safety
/// `rec` must be null or a live reconstruction handle.
#[no_mangle]
pub unsafe extern "C" fn fsp_reconstruction_gaussian_count(rec: *const FspReconstruction) -> usize {
    rec.as_ref().map_or(0, |r| r.0.reconstruction.set.len())
}

/// Frame index and pose of the `i`-th trajectory entry.
///
/// # Safety
/// `rec` must be a live reconstruction handle; `frame` and `pose` writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_reconstruction_pose(
    rec: *const FspReconstruction,
    i: usize,
    frame: *mut u32,
    pose: *mut FspPose,
) -> FspStatus {
    let Some(rec) = rec.as_ref() else {
        return fail(FspStatus::NullPointer, "null reconstruction");
    };
    if frame.is_null() || pose.is_null() {
        return fail(FspStatus::NullPointer, "null output");
    }
    match rec.0.reconstruction.trajectory.entries().get(i) {
        Some((f, p)) => {
            *frame = *f;
            *pose = from_pose(p);
            FspStatus::Ok
        }
        None => fail(FspStatus::InvalidArgument, "trajectory index out of range"),
    }
}

/// Holdout summary. `ate` is NaN when the run had no reference trajectory.
///
/// # Safety
/// `rec` must be a live reconstruction handle; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_reconstruction_scores(
    rec: *const FspReconstruction,
    mean_psnr: *mut f64,
    mean_ssim: *mut f64,
    ate: *mut f64,
) -> FspStatus {
    let Some(rec) = rec.as_ref() else {
        return fail(FspStatus::NullPointer, "null reconstruction");
    };
    if mean_psnr.is_null() || mean_ssim.is_null() || ate.is_null() {
        return fail(FspStatus::NullPointer, "null output");
    }
    let r = &rec.0.report;
    *mean_psnr = r.mean_psnr;
    *mean_ssim = r.mean_ssim;
    *ate = r.ate.unwrap_or(f64::NAN);
    FspStatus::Ok
}

/// Loads a serialized Gaussian set.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsp_set_load(path: *const c_char, out: *mut *mut FspGaussianSet) -> FspStatus {
    guard(|| {
        if out.is_null() {
            return fail(FspStatus::NullPointer, "null output");
        }
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match GaussianSet::load(Path::new(path)) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(FspGaussianSet(s)));
                FspStatus::Ok
            }
            Err(e) => fail(FspStatus::Data, &e.to_string()),
        }
    })
}

/// # Safety
/// `set` must come from [`fsp_set_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fsp_set_free(set: *mut FspGaussianSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// # Safety
/// `set` must be null or a live set handle.
#[no_mangle]
pub unsafe extern "C" fn fsp_set_len(set: *const FspGaussianSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// Renders `set` into `rgb`, which must hold `3 * width * height` values in
/// row-major RGB order.
///
/// # Safety
/// `set` must be a live set handle and `rgb` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn fsp_set_render(
    set: *const FspGaussianSet,
    camera: FspCamera,
    pose: FspPose,
    rgb: *mut f64,
    len: usize,
) -> FspStatus {
    guard(|| {
        let Some(set) = set.as_ref() else {
            return fail(FspStatus::NullPointer, "null set");
        };
        if rgb.is_null() {
            return fail(FspStatus::NullPointer, "null output");
        }
        let k = match CameraIntrinsics::new(
            camera.fx,
            camera.fy,
            camera.cx,
            camera.cy,
            camera.width as usize,
            camera.height as usize,
        ) {
            Ok(k) => k,
            Err(e) => return fail(FspStatus::InvalidArgument, &e.to_string()),
        };
        let need = 3 * k.pixel_count();
        if len != need {
            return fail(FspStatus::InvalidArgument, &format!("buffer holds {len} values, need {need}"));
        }
        let img = render(&set.0, &to_pose(&pose), &k).image();
        std::slice::from_raw_parts_mut(rgb, len).copy_from_slice(&img.data);
        FspStatus::Ok
    })
}

/// Prior pairs a run over `n` frames in fragments of `k` reads, as
/// `(view_a, view_b)` couples flattened into `out`. `count` always receives
/// the number of pairs; when `cap` (in pairs) is smaller, nothing is written
/// and `InvalidArgument` is returned.
///
/// # Safety
/// `count` must be writable and `out` valid for `2 * cap` writes.
#[no_mangle]
pub unsafe extern "C" fn fsp_required_pairs(
    n: usize,
    k: usize,
    out: *mut u32,
    cap: usize,
    count: *mut usize,
) -> FspStatus {
    if count.is_null() {
        return fail(FspStatus::NullPointer, "null count");
    }
    let pairs = match required_pairs(n, k) {
        Ok(p) => p,
        Err(e) => return fail(FspStatus::InvalidArgument, &e.to_string()),
    };
    *count = pairs.len();
    if cap < pairs.len() {
        return fail(FspStatus::InvalidArgument, "output too small");
    }
    if out.is_null() && !pairs.is_empty() {
        return fail(FspStatus::NullPointer, "null output");
    }
    let dst = if pairs.is_empty() { &mut [][..] } else { std::slice::from_raw_parts_mut(out, 2 * pairs.len()) };
    for (slot, (a, b)) in dst.chunks_exact_mut(2).zip(pairs) {
        slot[0] = a;
        slot[1] = b;
    }
    FspStatus::Ok
}

/// Clears the thread's error message.
#[no_mangle]
pub extern "C" fn fsp_clear_error() {
    set_error("");
}
