//! C ABI over `tabb-core`: opaque handles, integer status codes and a
//! thread-local last-error message.
//!
//! Every function returns a [`TabbStatus`]; outputs go through pointer
//! arguments. Handles are created by `*_new`/`*_load` functions and released
//! with the matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tabb_core::agents::AgentBundle;
use tabb_core::config::{desk_profile, Config, Resolver};
use tabb_core::datasets::{self, OfflineDataset, ScoreRefs};
use tabb_core::envs::{self, Env};
use tabb_core::{pipeline, tbm, Error};

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TabbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Checksum = 6,
    Version = 7,
    Dimension = 8,
    NonFinite = 9,
    UnsupportedEnv = 10,
    InvalidState = 11,
    Exists = 12,
    BufferTooSmall = 13,
    Panic = 99,
}

impl From<&Error> for TabbStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension { .. } => TabbStatus::Dimension,
            Error::NonFinite { .. } | Error::Diverged { .. } => TabbStatus::NonFinite,
            Error::InvalidArgument(_) | Error::Domain(_) | Error::Frozen(_) => TabbStatus::InvalidArgument,
            Error::UnsupportedEnv(_) => TabbStatus::UnsupportedEnv,
            Error::InvalidState(_) => TabbStatus::InvalidState,
            Error::Format { .. } | Error::Truncated { .. } | Error::Json(_) => TabbStatus::Format,
            Error::Checksum { .. } => TabbStatus::Checksum,
            Error::Version { .. } => TabbStatus::Version,
            Error::Config(_) => TabbStatus::Config,
            Error::Exists(_) => TabbStatus::Exists,
            Error::Io { .. } => TabbStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: TabbStatus, msg: impl Into<String>) -> TabbStatus {
    set_error(msg);
    status
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<(), TabbStatus>) -> TabbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TabbStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(TabbStatus::Panic, "internal panic"),
    }
}

fn core(e: Error) -> TabbStatus {
    fail(TabbStatus::from(&e), e.to_string())
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), TabbStatus> {
    if p.is_null() {
        Err(fail(TabbStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, TabbStatus> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TabbStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], TabbStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], TabbStatus> {
    if n == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn put<T>(out: *mut T, v: T, what: &str) -> Result<(), TabbStatus> {
    non_null(out, what)?;
    out.write(v);
    Ok(())
}

fn into_handle<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to fit) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tabb_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Opaque resolved configuration.
pub struct TabbConfig(Config);

/// Opaque environment (one side of a source/target pair).
pub struct TabbEnv(Env);

/// Opaque offline dataset.
pub struct TabbDataset(OfflineDataset);

/// Opaque trained agent.
pub struct TabbAgent(AgentBundle);

/// Default configuration; `desk != 0` selects the small desk profile.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tabb_config_new(desk: i32, out: *mut *mut TabbConfig) -> TabbStatus {
    guard(|| {
        let cfg = if desk != 0 { desk_profile() } else { Config::default() };
        put(out, into_handle(TabbConfig(cfg)), "out")
    })
}

/// Configuration from TOML text layered over the defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tabb_config_from_toml(toml: *const c_char, out: *mut *mut TabbConfig) -> TabbStatus {
    guard(|| {
        let text = c_str(toml, "toml")?;
        let cfg = Config::from_toml(text).map_err(core)?;
        put(out, into_handle(TabbConfig(cfg)), "out")
    })
}

/// Applies one `section.key=value` override.
///
/// # Safety
/// `cfg` must be a live handle and `assignment` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tabb_config_set(cfg: *mut TabbConfig, assignment: *const c_char) -> TabbStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        let a = c_str(assignment, "assignment")?;
        let next = Resolver::from_config(&(*cfg).0).sets([a]).and_then(|r| r.finish()).map_err(core)?;
        (*cfg).0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tabb_config_free(cfg: *mut TabbConfig) {
    free(cfg)
}

/// Builds the configured (source, target) environment pair.
///
/// # Safety
/// `cfg` must be a live handle; `source` and `target` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tabb_env_pair_new(cfg: *const TabbConfig, source: *mut *mut TabbEnv, target: *mut *mut TabbEnv) -> TabbStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        non_null(source, "source")?;
        non_null(target, "target")?;
        let (s, t) = pipeline::envs_for(&(*cfg).0).map_err(core)?;
        put(source, into_handle(TabbEnv(s)), "source")?;
        put(target, into_handle(TabbEnv(t)), "target")
    })
}

/// State and action feature sizes.
///
/// # Safety
/// `env` must be a live handle; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tabb_env_dims(env: *const TabbEnv, state_dim: *mut usize, action_dim: *mut usize) -> TabbStatus {
    guard(|| {
        non_null(env, "env")?;
        put(state_dim, (*env).0.state_dim(), "state_dim")?;
        put(action_dim, (*env).0.action_dim(), "action_dim")
    })
}

/// One seeded step from exactly `(state, action)`.
///
/// # Safety
/// Arrays must hold the given lengths; `next_state` must hold `state_len`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn tabb_env_replay(
    env: *const TabbEnv,
    state: *const f64,
    state_len: usize,
    action: *const f64,
    action_len: usize,
    seed: u64,
    reward: *mut f64,
    next_state: *mut f64,
) -> TabbStatus {
    guard(|| {
        non_null(env, "env")?;
        let e = &(*env).0;
        if state_len != e.state_dim() {
            return Err(core(Error::Dimension { context: "state".into(), expected: e.state_dim(), actual: state_len }));
        }
        let s = slice(state, state_len, "state")?;
        let a = slice(action, action_len, "action")?;
        let out = slice_mut(next_state, state_len, "next_state")?;
        let (r, ns) = envs::replay_once(e, s, a, seed).map_err(core)?;
        out.copy_from_slice(&ns);
        put(reward, r, "reward")
    })
}

/// # Safety
/// `env` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tabb_env_free(env: *mut TabbEnv) {
    free(env)
}

/// Generates and writes the configured datasets (`force != 0` overwrites).
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tabb_gen_data(cfg: *const TabbConfig, force: i32) -> TabbStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        pipeline::gen_data(&(*cfg).0, force != 0).map(|_| ()).map_err(core)
    })
}

/// Trains every configured seed for `run.variant`.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tabb_train(cfg: *const TabbConfig, force: i32) -> TabbStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        let c = &(*cfg).0;
        pipeline::train(c, &[c.run.variant], force != 0).map(|_| ()).map_err(core)
    })
}

/// Loads a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tabb_dataset_load(path: *const c_char, out: *mut *mut TabbDataset) -> TabbStatus {
    guard(|| {
        let p = c_str(path, "path")?;
        let ds = OfflineDataset::load(Path::new(p)).map_err(core)?;
        put(out, into_handle(TabbDataset(ds)), "out")
    })
}

/// Transition count and feature sizes.
///
/// # Safety
/// `ds` must be a live handle; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tabb_dataset_info(ds: *const TabbDataset, count: *mut usize, state_dim: *mut usize, action_dim: *mut usize) -> TabbStatus {
    guard(|| {
        non_null(ds, "ds")?;
        let d = &(*ds).0;
        put(count, d.len(), "count")?;
        put(state_dim, d.dims().state, "state_dim")?;
        put(action_dim, d.dims().action, "action_dim")
    })
}

/// Copies transition `index` out of the dataset.
///
/// # Safety
/// `state`/`next_state` must hold `state_dim` values, `action` `action_dim`.
#[no_mangle]
pub unsafe extern "C" fn tabb_dataset_get(
    ds: *const TabbDataset,
    index: usize,
    state: *mut f64,
    action: *mut f64,
    reward: *mut f64,
    next_state: *mut f64,
    terminal: *mut i32,
) -> TabbStatus {
    guard(|| {
        non_null(ds, "ds")?;
        let d = &(*ds).0;
        if index >= d.len() {
            return Err(fail(TabbStatus::InvalidArgument, format!("index {index} out of range ({} transitions)", d.len())));
        }
        let t = d.get(index);
        slice_mut(state, t.state.len(), "state")?.copy_from_slice(t.state);
        slice_mut(action, t.action.len(), "action")?.copy_from_slice(t.action);
        slice_mut(next_state, t.next_state.len(), "next_state")?.copy_from_slice(t.next_state);
        put(reward, t.reward, "reward")?;
        put(terminal, t.terminal as i32, "terminal")
    })
}

/// Writes the dataset to `path`.
///
/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tabb_dataset_save(ds: *const TabbDataset, path: *const c_char) -> TabbStatus {
    guard(|| {
        non_null(ds, "ds")?;
        let p = c_str(path, "path")?;
        (*ds).0.save(Path::new(p)).map_err(core)
    })
}

/// # Safety
/// `ds` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tabb_dataset_free(ds: *mut TabbDataset) {
    free(ds)
}

/// Loads an agent checkpoint; its env must match `cfg`.
///
/// # Safety
/// `cfg` must be a live handle, `path` a NUL-terminated string, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tabb_agent_load(cfg: *const TabbConfig, path: *const c_char, out: *mut *mut TabbAgent) -> TabbStatus {
    guard(|| {
        non_null(cfg, "cfg")?;
        let p = c_str(path, "path")?;
        let c = &(*cfg).0;
        let (_, env) = pipeline::envs_for(c).map_err(core)?;
        let (bundle, _) = pipeline::load_agent(c, Path::new(p), env.action_box()).map_err(core)?;
        put(out, into_handle(TabbAgent(bundle)), "out")
    })
}

/// Deterministic action for raw state features.
///
/// # Safety
/// `features` must hold `features_len` values and `action` `action_len`.
#[no_mangle]
pub unsafe extern "C" fn tabb_agent_act(
    agent: *const TabbAgent,
    features: *const f64,
    features_len: usize,
    action: *mut f64,
    action_len: usize,
) -> TabbStatus {
    guard(|| {
        non_null(agent, "agent")?;
        let f = slice(features, features_len, "features")?;
        let a = (*agent).0.act(f).map_err(core)?;
        if a.len() > action_len {
            return Err(fail(TabbStatus::BufferTooSmall, format!("action buffer holds {action_len}, need {}", a.len())));
        }
        slice_mut(action, a.len(), "action")?.copy_from_slice(&a);
        Ok(())
    })
}

/// # Safety
/// `agent` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tabb_agent_free(agent: *mut TabbAgent) {
    free(agent)
}

/// Softmax transferability weights of `n` mismatch scores.
///
/// # Safety
/// `scores` and `weights` must each hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn tabb_weights(scores: *const f64, n: usize, temperature: f64, weights: *mut f64) -> TabbStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let w = tbm::weights(s, temperature).map_err(core)?;
        slice_mut(weights, n, "weights")?.copy_from_slice(&w.weights);
        Ok(())
    })
}

/// `100 (j - j_random) / (j_expert - j_random)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tabb_normalized_score(j: f64, j_random: f64, j_expert: f64, out: *mut f64) -> TabbStatus {
    guard(|| {
        let v = datasets::normalized_score(j, ScoreRefs { random: j_random, expert: j_expert }).map_err(core)?;
        put(out, v, "out")
    })
}
