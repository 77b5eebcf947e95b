//! C interface to the distance-field library.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`CssdfStatus`]; on failure the message is kept per thread and can be read
//! with [`cssdf_last_error`]. Arrays are row-major `double` buffers whose
//! lengths are implied by the handle's dimensions and the `count` argument.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cssdf::field::FieldModel;
use cssdf::fields::{DistanceField, LearnedField, OracleField};
use cssdf::geometry::Scene;
use cssdf::mpc::{Controller, MpcParams, StepStatus};
use cssdf::robot::RobotModel;
use cssdf::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CssdfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    DimensionMismatch = 3,
    Io = 4,
    Format = 5,
    Version = 6,
    Optimization = 7,
    Panic = 8,
    Other = 9,
}

/// Outcome of one controller step.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CssdfStepStatus {
    Solved = 0,
    Fallback = 1,
    EmergencyStop = 2,
}

pub struct CssdfRobot(RobotModel);
pub struct CssdfModel(FieldModel);
pub struct CssdfField(Box<dyn DistanceField + Send>);
pub struct CssdfController(Controller);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CssdfStatus {
    match e {
        Error::InvalidInput(_) | Error::Range { .. } | Error::Schema(_) | Error::OutOfBounds(_) | Error::ClassMissing(_) => {
            CssdfStatus::InvalidInput
        }
        Error::DimensionMismatch { .. } => CssdfStatus::DimensionMismatch,
        Error::Io(_) => CssdfStatus::Io,
        Error::Format(_) => CssdfStatus::Format,
        Error::Version { .. } => CssdfStatus::Version,
        Error::Optimization(_) | Error::PlanningFailed(_) | Error::Diverged { .. } => CssdfStatus::Optimization,
        _ => CssdfStatus::Other,
    }
}

struct Fail(CssdfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CssdfStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CssdfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CssdfStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CssdfStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CssdfStatus::InvalidInput, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn cssdf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cssdf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Built-in robots: 0 = planar two-link arm, 1 = seven-joint arm.
#[no_mangle]
pub unsafe extern "C" fn cssdf_robot_builtin(kind: u32, out: *mut *mut CssdfRobot) -> CssdfStatus {
    guard(|| {
        let r = match kind {
            0 => RobotModel::planar_benchmark(),
            1 => RobotModel::panda_like(),
            k => return Err(Fail(CssdfStatus::InvalidInput, format!("unknown built-in robot {k}"))),
        };
        put(out, CssdfRobot(r))
    })
}

/// Robot from a description JSON file.
#[no_mangle]
pub unsafe extern "C" fn cssdf_robot_load(path: *const c_char, out: *mut *mut CssdfRobot) -> CssdfStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        put(out, CssdfRobot(RobotModel::load(Path::new(p))?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn cssdf_robot_dof(robot: *const CssdfRobot) -> usize {
    robot.as_ref().map_or(0, |r| r.0.dof())
}

#[no_mangle]
pub unsafe extern "C" fn cssdf_robot_free(robot: *mut CssdfRobot) {
    free(robot)
}

/// Untrained model sized for `robot`.
#[no_mangle]
pub unsafe extern "C" fn cssdf_model_new(robot: *const CssdfRobot, seed: u64, out: *mut *mut CssdfModel) -> CssdfStatus {
    guard(|| {
        let r = as_ref(robot, "robot")?;
        put(out, CssdfModel(FieldModel::for_robot(&r.0, seed)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn cssdf_model_load(path: *const c_char, out: *mut *mut CssdfModel) -> CssdfStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        put(out, CssdfModel(FieldModel::load(Path::new(p))?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn cssdf_model_save(model: *const CssdfModel, path: *const c_char) -> CssdfStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let p = str_arg(path, "path")?;
        Ok(m.0.save(Path::new(p))?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn cssdf_model_dof(model: *const CssdfModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.dof())
}

#[no_mangle]
pub unsafe extern "C" fn cssdf_model_point_dim(model: *const CssdfModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.point_dim())
}

#[no_mangle]
pub unsafe extern "C" fn cssdf_model_free(model: *mut CssdfModel) {
    free(model)
}

/// Distances for `count` pairs: `qs` is `count x dof`, `ps` is
/// `count x point_dim`, `values` receives `count` entries.
#[no_mangle]
pub unsafe extern "C" fn cssdf_model_predict(
    model: *const CssdfModel,
    qs: *const f64,
    ps: *const f64,
    count: usize,
    values: *mut f64,
) -> CssdfStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let qs = slice(qs, count * m.dof(), "qs")?;
        let ps = slice(ps, count * m.point_dim(), "ps")?;
        let out = slice_mut(values, count, "values")?;
        out.copy_from_slice(&m.predict_batch(qs, ps)?);
        Ok(())
    })
}

/// As [`cssdf_model_predict`], plus `grads` (`count x dof`) with respect to q.
#[no_mangle]
pub unsafe extern "C" fn cssdf_model_predict_with_grad(
    model: *const CssdfModel,
    qs: *const f64,
    ps: *const f64,
    count: usize,
    values: *mut f64,
    grads: *mut f64,
) -> CssdfStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let n = m.dof();
        let qs = slice(qs, count * n, "qs")?;
        let ps = slice(ps, count * m.point_dim(), "ps")?;
        let ov = slice_mut(values, count, "values")?;
        let og = slice_mut(grads, count * n, "grads")?;
        let (v, g) = m.predict_with_grad_batch(qs, ps)?;
        ov.copy_from_slice(&v);
        og.copy_from_slice(&g);
        Ok(())
    })
}

/// Grid-oracle field of `robot` in the scene given as JSON (null for an
/// empty scene), `cells` per joint.
#[no_mangle]
pub unsafe extern "C" fn cssdf_field_oracle(
    robot: *const CssdfRobot,
    scene_json: *const c_char,
    cells: usize,
    out: *mut *mut CssdfField,
) -> CssdfStatus {
    guard(|| {
        let r = &as_ref(robot, "robot")?.0;
        let scene = scene_arg(scene_json, r.point_dim())?;
        put(out, CssdfField(Box::new(OracleField::new(r.clone(), scene, cells)?)))
    })
}

/// Learned field: `model` queried against the scene's surface points sampled
/// at `spacing`. The model is copied.
#[no_mangle]
pub unsafe extern "C" fn cssdf_field_learned(
    model: *const CssdfModel,
    scene_json: *const c_char,
    spacing: f64,
    out: *mut *mut CssdfField,
) -> CssdfStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let scene = scene_arg(scene_json, m.point_dim())?;
        put(out, CssdfField(Box::new(LearnedField::new(m.clone(), scene, spacing)?)))
    })
}

unsafe fn scene_arg(p: *const c_char, point_dim: usize) -> Result<Scene, Fail> {
    if p.is_null() {
        return Ok(Scene::default());
    }
    Ok(Scene::from_json(str_arg(p, "scene")?, point_dim)?)
}

/// Signed distance at `q` and time `t`; `grad` receives `dof` entries.
#[no_mangle]
pub unsafe extern "C" fn cssdf_field_distance(
    field: *const CssdfField,
    q: *const f64,
    t: f64,
    value: *mut f64,
    grad: *mut f64,
) -> CssdfStatus {
    guard(|| {
        let f = &as_ref(field, "field")?.0;
        let n = f.dof();
        let q = slice(q, n, "q")?;
        let out = as_mut(value, "value")?;
        let g = slice_mut(grad, n, "grad")?;
        let r = f.distance(q, t)?;
        *out = r.value;
        g.copy_from_slice(&r.grad);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cssdf_field_free(field: *mut CssdfField) {
    free(field)
}

/// Safety-filtered MPC for `robot`. `params_json` holds controller settings
/// (any subset; null for defaults).
#[no_mangle]
pub unsafe extern "C" fn cssdf_controller_new(
    robot: *const CssdfRobot,
    params_json: *const c_char,
    out: *mut *mut CssdfController,
) -> CssdfStatus {
    guard(|| {
        let r = &as_ref(robot, "robot")?.0;
        let params: MpcParams = if params_json.is_null() {
            MpcParams::default()
        } else {
            serde_json::from_str(str_arg(params_json, "params")?).map_err(|e| Fail(CssdfStatus::InvalidInput, e.to_string()))?
        };
        put(out, CssdfController(Controller::new(params, r.lower_limits(), r.upper_limits())?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn cssdf_controller_horizon(ctrl: *const CssdfController) -> usize {
    ctrl.as_ref().map_or(0, |c| c.0.params().horizon)
}

/// One control step at state `q` and time `t`. `reference` is
/// `horizon x dof` (targets for predicted steps 1..=horizon); `u` receives
/// the `dof` joint velocities to apply.
#[no_mangle]
pub unsafe extern "C" fn cssdf_controller_step(
    ctrl: *mut CssdfController,
    field: *const CssdfField,
    q: *const f64,
    t: f64,
    reference: *const f64,
    u: *mut f64,
    status: *mut CssdfStepStatus,
) -> CssdfStatus {
    guard(|| {
        let c = &mut as_mut(ctrl, "controller")?.0;
        let f = &as_ref(field, "field")?.0;
        let n = f.dof();
        let h = c.params().horizon;
        let q = slice(q, n, "q")?;
        let reference: Vec<Vec<f64>> = slice(reference, h * n, "reference")?.chunks(n).map(<[f64]>::to_vec).collect();
        let out = slice_mut(u, n, "u")?;
        let st = as_mut(status, "status")?;
        let log = c.step(q, t, f.as_ref(), &reference)?;
        out.copy_from_slice(&log.u);
        *st = match log.status {
            StepStatus::Solved => CssdfStepStatus::Solved,
            StepStatus::Fallback => CssdfStepStatus::Fallback,
            StepStatus::EmergencyStop => CssdfStepStatus::EmergencyStop,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cssdf_controller_free(ctrl: *mut CssdfController) {
    free(ctrl)
}
