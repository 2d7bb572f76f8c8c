//! C ABI for the sqrec superquadric recovery library.
//!
//! All functions return a status code; results come back through out
//! parameters. Point clouds and fit results are opaque handles that must be
//! released with the matching `_free` function. A human-readable message
//! for the most recent failure on the calling thread is available via
//! `sqrec_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use sqrec::ems::{self, AreaMode, FitConfig, FitResult};
use sqrec::geometry::{sample_surface_equidistant, PointCloud, Superquadric};
use sqrec::math::{Point3, Pose, Quat, Vec3};
use sqrec::Error;

/// Status codes returned by every fallible entry point.
pub const SQREC_OK: i32 = 0;
pub const SQREC_ERR_NULL_ARGUMENT: i32 = 1;
pub const SQREC_ERR_INVALID_ARGUMENT: i32 = 2;
pub const SQREC_ERR_INSUFFICIENT_POINTS: i32 = 3;
pub const SQREC_ERR_FIT_FAILURE: i32 = 4;
pub const SQREC_ERR_PANIC: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidParam(_) => SQREC_ERR_INVALID_ARGUMENT,
        Error::InsufficientPoints { .. } => SQREC_ERR_INSUFFICIENT_POINTS,
        _ => SQREC_ERR_FIT_FAILURE,
    }
}

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sqrec_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opaque point cloud.
pub struct SqrecCloud(PointCloud);

/// Opaque fit result.
pub struct SqrecFitResult(FitResult);

/// Superquadric parameters; rotation is a unit quaternion `[w, x, y, z]`.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct SqrecSuperquadric {
    pub eps1: f64,
    pub eps2: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

/// Fit configuration mirroring the library defaults; initialize with
/// `sqrec_fit_config_default` and override fields as needed.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct SqrecFitConfig {
    pub max_em_iters: usize,
    pub rel_tol_nll: f64,
    pub max_switches: usize,
    pub w_o: f64,
    /// 0 = fast bilinear area blend, 1 = numerical quadrature
    pub area_mode: i32,
    pub seed: u64,
}

impl SqrecFitConfig {
    fn to_config(self) -> Result<FitConfig, Error> {
        let area_mode = match self.area_mode {
            0 => AreaMode::Fast,
            1 => AreaMode::Quadrature,
            other => {
                return Err(Error::InvalidParam(format!("unknown area mode {other}")))
            }
        };
        Ok(FitConfig {
            max_em_iters: self.max_em_iters,
            rel_tol_nll: self.rel_tol_nll,
            max_switches: self.max_switches,
            w_o: self.w_o,
            area_mode,
            seed: self.seed,
            ..FitConfig::default()
        })
    }
}

fn to_superquadric(p: &SqrecSuperquadric) -> Result<Superquadric, Error> {
    let [w, x, y, z] = p.rotation;
    let q = Quat { w, x, y, z };
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidParam("rotation quaternion is not unit".into()));
    }
    let [tx, ty, tz] = p.translation;
    Superquadric::new(
        p.eps1,
        p.eps2,
        p.ax,
        p.ay,
        p.az,
        Pose::new(q.renormalize(), Vec3::new(tx, ty, tz)),
    )
}

fn from_superquadric(sq: &Superquadric) -> SqrecSuperquadric {
    let q = sq.pose.rotation;
    let t = sq.pose.translation;
    SqrecSuperquadric {
        eps1: sq.eps1,
        eps2: sq.eps2,
        ax: sq.ax,
        ay: sq.ay,
        az: sq.az,
        rotation: [q.w, q.x, q.y, q.z],
        translation: [t.x, t.y, t.z],
    }
}

fn guarded<F: FnOnce() -> i32>(f: F) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_last_error("internal panic");
            SQREC_ERR_PANIC
        }
    }
}

/// Create a cloud from `n` interleaved xyz triples (length `3 * n`).
///
/// # Safety
/// `xyz` must point to `3 * n` readable doubles and `out` must be a valid
/// destination for a pointer.
#[no_mangle]
pub unsafe extern "C" fn sqrec_cloud_create(
    xyz: *const f64,
    n: usize,
    out: *mut *mut SqrecCloud,
) -> i32 {
    if xyz.is_null() || out.is_null() {
        set_last_error("null argument");
        return SQREC_ERR_NULL_ARGUMENT;
    }
    let data = slice::from_raw_parts(xyz, 3 * n);
    guarded(|| {
        let points: Vec<Point3> = data
            .chunks_exact(3)
            .map(|c| Point3::new(c[0], c[1], c[2]))
            .collect();
        match PointCloud::new(points) {
            Ok(cloud) => {
                *out = Box::into_raw(Box::new(SqrecCloud(cloud)));
                SQREC_OK
            }
            Err(e) => {
                set_last_error(&e.to_string());
                code_for(&e)
            }
        }
    })
}

/// # Safety
/// `cloud` must be a pointer returned by `sqrec_cloud_create` (or null).
#[no_mangle]
pub unsafe extern "C" fn sqrec_cloud_free(cloud: *mut SqrecCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

#[no_mangle]
pub extern "C" fn sqrec_cloud_len(cloud: *const SqrecCloud) -> usize {
    if cloud.is_null() {
        return 0;
    }
    unsafe { (*cloud).0.len() }
}

#[no_mangle]
pub extern "C" fn sqrec_fit_config_default(out: *mut SqrecFitConfig) -> i32 {
    if out.is_null() {
        set_last_error("null argument");
        return SQREC_ERR_NULL_ARGUMENT;
    }
    let d = FitConfig::default();
    let cfg = SqrecFitConfig {
        max_em_iters: d.max_em_iters,
        rel_tol_nll: d.rel_tol_nll,
        max_switches: d.max_switches,
        w_o: d.w_o,
        area_mode: 0,
        seed: d.seed,
    };
    unsafe { *out = cfg };
    SQREC_OK
}

/// Fit a superquadric; pass a null `config` for defaults.
///
/// # Safety
/// `cloud` must be a live cloud handle; `config` null or valid; `out` a
/// valid destination for a pointer.
#[no_mangle]
pub unsafe extern "C" fn sqrec_fit(
    cloud: *const SqrecCloud,
    config: *const SqrecFitConfig,
    out: *mut *mut SqrecFitResult,
) -> i32 {
    if cloud.is_null() || out.is_null() {
        set_last_error("null argument");
        return SQREC_ERR_NULL_ARGUMENT;
    }
    let cloud = &(*cloud).0;
    let cfg = if config.is_null() { None } else { Some(*config) };
    guarded(|| {
        let cfg = match cfg.map(SqrecFitConfig::to_config).transpose() {
            Ok(c) => c.unwrap_or_default(),
            Err(e) => {
                set_last_error(&e.to_string());
                return code_for(&e);
            }
        };
        match ems::ems_fit(cloud, &cfg) {
            Ok(fit) => {
                *out = Box::into_raw(Box::new(SqrecFitResult(fit)));
                SQREC_OK
            }
            Err(e) => {
                set_last_error(&e.to_string());
                code_for(&e)
            }
        }
    })
}

/// # Safety
/// `fit` must be a pointer returned by `sqrec_fit` (or null).
#[no_mangle]
pub unsafe extern "C" fn sqrec_fit_result_free(fit: *mut SqrecFitResult) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

#[no_mangle]
pub extern "C" fn sqrec_fit_result_superquadric(
    fit: *const SqrecFitResult,
    out: *mut SqrecSuperquadric,
) -> i32 {
    if fit.is_null() || out.is_null() {
        set_last_error("null argument");
        return SQREC_ERR_NULL_ARGUMENT;
    }
    unsafe { *out = from_superquadric(&(*fit).0.superquadric) };
    SQREC_OK
}

#[no_mangle]
pub extern "C" fn sqrec_fit_result_sigma2(fit: *const SqrecFitResult) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    unsafe { (*fit).0.sigma2 }
}

#[no_mangle]
pub extern "C" fn sqrec_fit_result_nll(fit: *const SqrecFitResult) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    unsafe { (*fit).0.final_nll }
}

#[no_mangle]
pub extern "C" fn sqrec_fit_result_iterations(fit: *const SqrecFitResult) -> usize {
    if fit.is_null() {
        return 0;
    }
    unsafe { (*fit).0.iterations }
}

/// Copy the per-point inlier probabilities into `out` (capacity `cap`);
/// returns the number of values written.
///
/// # Safety
/// `out` must have room for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn sqrec_fit_result_weights(
    fit: *const SqrecFitResult,
    out: *mut f64,
    cap: usize,
) -> usize {
    if fit.is_null() || out.is_null() {
        return 0;
    }
    let z = &(*fit).0.z_hat;
    let n = z.len().min(cap);
    ptr::copy_nonoverlapping(z.as_ptr(), out, n);
    n
}

/// Evaluate the implicit function at a world-space point.
#[no_mangle]
pub extern "C" fn sqrec_implicit_value(
    params: *const SqrecSuperquadric,
    x: f64,
    y: f64,
    z: f64,
    out: *mut f64,
) -> i32 {
    if params.is_null() || out.is_null() {
        set_last_error("null argument");
        return SQREC_ERR_NULL_ARGUMENT;
    }
    guarded(|| {
        let sq = match to_superquadric(unsafe { &*params }) {
            Ok(s) => s,
            Err(e) => {
                set_last_error(&e.to_string());
                return code_for(&e);
            }
        };
        unsafe { *out = sq.implicit_value(Point3::new(x, y, z)) };
        SQREC_OK
    })
}

/// Sample the surface at roughly equidistant spacing. On success `*points`
/// holds `3 * *n` doubles owned by the library; release with
/// `sqrec_points_free`.
///
/// # Safety
/// `params`, `points` and `n` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sqrec_sample_surface(
    params: *const SqrecSuperquadric,
    spacing: f64,
    points: *mut *mut f64,
    n: *mut usize,
) -> i32 {
    if params.is_null() || points.is_null() || n.is_null() {
        set_last_error("null argument");
        return SQREC_ERR_NULL_ARGUMENT;
    }
    guarded(|| {
        let sq = match to_superquadric(&*params) {
            Ok(s) => s,
            Err(e) => {
                set_last_error(&e.to_string());
                return code_for(&e);
            }
        };
        match sample_surface_equidistant(&sq, spacing) {
            Ok(samples) => {
                let mut flat = Vec::with_capacity(3 * samples.points.len());
                for p in &samples.points {
                    flat.extend_from_slice(&[p.x, p.y, p.z]);
                }
                *n = samples.points.len();
                let mut boxed = flat.into_boxed_slice();
                *points = boxed.as_mut_ptr();
                std::mem::forget(boxed);
                SQREC_OK
            }
            Err(e) => {
                set_last_error(&e.to_string());
                code_for(&e)
            }
        }
    })
}

/// # Safety
/// `points`/`n` must come from a successful `sqrec_sample_surface` call.
#[no_mangle]
pub unsafe extern "C" fn sqrec_points_free(points: *mut f64, n: usize) {
    if !points.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(points, 3 * n)));
    }
}
