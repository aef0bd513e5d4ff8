//! C ABI over the `gp2e` policy and toy environment.
//!
//! Handles are opaque pointers created by `*_new`/`*_load` and released with
//! the matching `*_free`. Every fallible call returns a [`Gp2eStatus`]; on
//! failure the message is kept per thread and read with
//! [`gp2e_last_error_message`]. Panics are caught at the boundary and
//! reported as [`Gp2eStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gp2e::env::{check_success, env_step, observe, reset, scripted_expert, EnvState, TaskKind, TaskSpec};
use gp2e::policy::load_checkpoint;
use gp2e::{Policy, PointCloudObservation, Tensor};

/// Status code returned by every fallible call.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gp2eStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Toy task identifiers accepted by [`gp2e_env_new`].
pub const GP2E_TASK_TOY_FILL: u32 = 1;
pub const GP2E_TASK_TOY_POUR: u32 = 2;
/// Length of the robot state vector.
pub const GP2E_ROBOT_STATE_DIM: usize = 7;
/// Length of the action vector `[dx, dy, dz, grip]`.
pub const GP2E_ACTION_DIM: usize = 4;
/// Columns per point: `x, y, z, r, g, b`.
pub const GP2E_POINT_COLS: usize = 6;

/// A trained policy loaded from a checkpoint.
pub struct Gp2ePolicy {
    policy: Policy,
}

/// One toy environment episode.
pub struct Gp2eEnv {
    spec: TaskSpec,
    state: EnvState,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(Gp2eStatus, String);

type Outcome = Result<(), Failure>;

fn fail<T>(status: Gp2eStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(body: impl FnOnce() -> Outcome) -> Gp2eStatus {
    let result = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(Gp2eStatus::Panic, msg))
    });
    match result {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            Gp2eStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return fail(Gp2eStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return fail(Gp2eStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .map_or_else(|| fail(Gp2eStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .map_or_else(|| fail(Gp2eStatus::NullPointer, format!("{what} is null")), Ok)
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gp2e_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint file into a new policy handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gp2e_policy_load(path: *const c_char, out: *mut *mut Gp2ePolicy) -> Gp2eStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(Gp2eStatus::NullPointer, "path or out is null");
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .or_else(|_| fail(Gp2eStatus::InvalidArgument, "path is not UTF-8"))?;
        let ckpt = load_checkpoint(Path::new(path)).map_err(|e| {
            let status = if matches!(e, gp2e::policy::CheckpointError::Io(_)) {
                Gp2eStatus::Io
            } else {
                Gp2eStatus::Format
            };
            Failure(status, format!("{path}: {e}"))
        })?;
        let policy = Policy::from_parts(ckpt.config, ckpt.params)
            .map_err(|e| Failure(Gp2eStatus::Format, e.to_string()))?;
        *out = Box::into_raw(Box::new(Gp2ePolicy { policy }));
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle from [`gp2e_policy_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gp2e_policy_free(policy: *mut Gp2ePolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Number of cloud points the policy expects.
///
/// # Safety
/// `policy` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gp2e_policy_n_points(policy: *const Gp2ePolicy, out: *mut usize) -> Gp2eStatus {
    guard(|| {
        let p = handle(policy, "policy")?;
        *handle_mut(out, "out")? = p.policy.config.n_points;
        Ok(())
    })
}

/// Runs the policy on an `n_points × 6` row-major cloud and a robot state of
/// [`GP2E_ROBOT_STATE_DIM`] values, writing [`GP2E_ACTION_DIM`] values.
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gp2e_policy_forward(
    policy: *const Gp2ePolicy,
    points: *const f64,
    n_points: usize,
    robot_state: *const f64,
    state_len: usize,
    action_out: *mut f64,
    action_len: usize,
) -> Gp2eStatus {
    guard(|| {
        let p = &handle(policy, "policy")?.policy;
        let pts = slice(points, n_points.saturating_mul(GP2E_POINT_COLS), "points")?;
        let rs = slice(robot_state, state_len, "robot_state")?;
        let out = slice_mut(action_out, action_len, "action_out")?;
        if action_len < p.config.action_dim {
            return fail(
                Gp2eStatus::BufferTooSmall,
                format!("action buffer holds {action_len}, need {}", p.config.action_dim),
            );
        }
        let bad = |e: gp2e::TensorError| Failure(Gp2eStatus::InvalidArgument, e.to_string());
        let obs = PointCloudObservation {
            points: Tensor::new(vec![n_points, GP2E_POINT_COLS], pts.to_vec()).map_err(bad)?,
            robot_state: Tensor::vector(rs.to_vec()).map_err(bad)?,
        };
        let action = p.forward(&obs).map_err(|e| {
            let status = match e {
                gp2e::policy::PolicyError::Tensor(gp2e::TensorError::NonFinite { .. }) => {
                    Gp2eStatus::Numeric
                }
                _ => Gp2eStatus::InvalidArgument,
            };
            Failure(status, e.to_string())
        })?;
        out[..action.len()].copy_from_slice(action.data());
        Ok(())
    })
}

/// Creates an environment for `task` and resets it with `seed`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gp2e_env_new(task: u32, seed: u64, out: *mut *mut Gp2eEnv) -> Gp2eStatus {
    guard(|| {
        let out = handle_mut(out, "out")?;
        *out = ptr::null_mut();
        let task = TaskKind::from_id(task)
            .map_or_else(|| fail(Gp2eStatus::InvalidArgument, format!("unknown task id {task}")), Ok)?;
        let spec = TaskSpec::new(task);
        let state = reset(&spec, seed);
        *out = Box::into_raw(Box::new(Gp2eEnv { spec, state }));
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle from [`gp2e_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gp2e_env_free(env: *mut Gp2eEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Starts a new episode from `seed`.
///
/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gp2e_env_reset(env: *mut Gp2eEnv, seed: u64) -> Gp2eStatus {
    guard(|| {
        let e = handle_mut(env, "env")?;
        e.state = reset(&e.spec, seed);
        Ok(())
    })
}

/// Applies one action `[dx, dy, dz, grip]` over `substeps` physics substeps.
///
/// # Safety
/// `env` must be a live handle; `action` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn gp2e_env_step(
    env: *mut Gp2eEnv,
    action: *const f64,
    len: usize,
    substeps: u32,
) -> Gp2eStatus {
    guard(|| {
        let e = handle_mut(env, "env")?;
        let a = slice(action, len, "action")?;
        env_step(&mut e.state, &e.spec, a, substeps as usize).map_err(|err| {
            let status = match err {
                gp2e::env::EnvError::NonFiniteAction { .. } => Gp2eStatus::Numeric,
                _ => Gp2eStatus::InvalidArgument,
            };
            Failure(status, err.to_string())
        })
    })
}

/// Renders an observation: `n_points × 6` values into `points_out` and
/// [`GP2E_ROBOT_STATE_DIM`] values into `robot_state_out`.
///
/// # Safety
/// `env` must be a live handle; buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gp2e_env_observe(
    env: *const Gp2eEnv,
    n_points: usize,
    points_out: *mut f64,
    points_len: usize,
    robot_state_out: *mut f64,
    state_len: usize,
) -> Gp2eStatus {
    guard(|| {
        let e = handle(env, "env")?;
        let pts = slice_mut(points_out, points_len, "points_out")?;
        let rs = slice_mut(robot_state_out, state_len, "robot_state_out")?;
        if n_points == 0 {
            return fail(Gp2eStatus::InvalidArgument, "n_points must be positive");
        }
        if points_len < n_points * GP2E_POINT_COLS || state_len < GP2E_ROBOT_STATE_DIM {
            return fail(
                Gp2eStatus::BufferTooSmall,
                format!(
                    "need {} point values and {GP2E_ROBOT_STATE_DIM} state values",
                    n_points * GP2E_POINT_COLS
                ),
            );
        }
        let obs = observe(&e.state, n_points)
            .map_err(|err| Failure(Gp2eStatus::InvalidArgument, err.to_string()))?;
        pts[..obs.points.len()].copy_from_slice(obs.points.data());
        rs[..obs.robot_state.len()].copy_from_slice(obs.robot_state.data());
        Ok(())
    })
}

/// Writes 1 to `success_out` when the current state meets the task's
/// success rule, 0 otherwise. `step_out` receives the policy step count.
///
/// # Safety
/// `env` must be a live handle; outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn gp2e_env_success(
    env: *const Gp2eEnv,
    success_out: *mut i32,
    step_out: *mut u64,
) -> Gp2eStatus {
    guard(|| {
        let e = handle(env, "env")?;
        *handle_mut(success_out, "success_out")? = check_success(&e.state, &e.spec).success as i32;
        if let Some(s) = step_out.as_mut() {
            *s = e.state.step as u64;
        }
        Ok(())
    })
}

/// Scripted expert action for the current state.
///
/// # Safety
/// `env` must be a live handle; `action_out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn gp2e_env_expert_action(
    env: *const Gp2eEnv,
    action_out: *mut f64,
    len: usize,
) -> Gp2eStatus {
    guard(|| {
        let e = handle(env, "env")?;
        let out = slice_mut(action_out, len, "action_out")?;
        if len < GP2E_ACTION_DIM {
            return fail(Gp2eStatus::BufferTooSmall, format!("need {GP2E_ACTION_DIM} values"));
        }
        out[..GP2E_ACTION_DIM].copy_from_slice(&scripted_expert(&e.state, &e.spec));
        Ok(())
    })
}
