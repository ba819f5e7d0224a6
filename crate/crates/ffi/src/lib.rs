//! C ABI over `flda_core`.
//!
//! Every fallible call returns an [`FldaStatus`]; on failure the message is
//! available from [`flda_last_error`] on the same thread. Objects are opaque
//! handles created by `*_new`/`*_from_*` and released by the matching
//! `*_free`, which accepts null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use flda_core::analytic::{self, ThroughputQuery};
use flda_core::fed::Phase;
use flda_core::phy::{subpacket_plan, FrameConfig};
use flda_core::{Error, MetricsTrace, SimConfig, Simulation};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FldaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Data = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// Inputs of the closed-form throughput model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FldaThroughputQuery {
    pub access_prob: f64,
    pub channels: usize,
    pub active_users: f64,
    pub lambda: f64,
    pub info_subpackets: u64,
    pub code_rate: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FldaSubpacketPlan {
    pub bits: u64,
    pub info: u64,
    pub total: u64,
}

/// `phase` is -1 for the initial evaluation, 0 for FD and 1 for FL.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FldaMetricsPoint {
    pub time_s: f64,
    pub iteration: u64,
    pub phase: i32,
    pub mean_accuracy: f64,
    pub mean_battery: f64,
    pub mean_energy_j: f64,
    pub updates_received: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FldaIteration {
    pub iteration: u64,
    pub phase: i32,
    pub slots: u64,
    pub committed: usize,
    pub received: usize,
    pub broadcast_to: usize,
}

pub struct FldaConfig(SimConfig);
pub struct FldaSim(Simulation);
pub struct FldaTrace(MetricsTrace);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> FldaStatus {
    match e {
        Error::Io { .. } => FldaStatus::Io,
        Error::ConfigParse { .. } | Error::ConfigValue { .. } => FldaStatus::Config,
        Error::Format(_) | Error::DimensionMismatch { .. } | Error::Capacity { .. } | Error::MissingLogit(_) => {
            FldaStatus::Data
        }
        Error::InvalidArgument(_) => FldaStatus::InvalidArgument,
    }
}

struct Fail(FldaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FldaStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FldaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FldaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FldaStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FldaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn phase_code(p: Option<Phase>) -> i32 {
    match p {
        None => -1,
        Some(Phase::Distillation) => 0,
        Some(Phase::Learning) => 1,
    }
}

fn query(q: &FldaThroughputQuery) -> Result<ThroughputQuery, Fail> {
    let q = ThroughputQuery {
        access_prob: q.access_prob,
        channels: q.channels,
        active_users: q.active_users,
        lambda: q.lambda,
        info_subpackets: q.info_subpackets,
        code_rate: q.code_rate,
    };
    q.validate()?;
    Ok(q)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn flda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static, NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn flda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Probability that a device's subpackets see no other active user.
///
/// # Safety
/// `q` and `out` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_p_a(q: *const FldaThroughputQuery, out_value: *mut f64) -> FldaStatus {
    guard(|| {
        let q = query(get(q, "q")?)?;
        *out(out_value, "out_value")? = analytic::p_a(&q);
        Ok(())
    })
}

/// # Safety
/// `out_value` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_p_s(lambda: f64, channels: usize, out_value: *mut f64) -> FldaStatus {
    guard(|| {
        if lambda.is_nan() || lambda < 0.0 || channels == 0 {
            return Err(Fail(FldaStatus::InvalidArgument, "need lambda >= 0 and channels >= 1".into()));
        }
        *out(out_value, "out_value")? = analytic::p_s(lambda, channels);
        Ok(())
    })
}

/// # Safety
/// `q` and `out_value` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_p_ma(q: *const FldaThroughputQuery, out_value: *mut f64) -> FldaStatus {
    guard(|| {
        let q = query(get(q, "q")?)?;
        *out(out_value, "out_value")? = analytic::p_ma(&q);
        Ok(())
    })
}

/// Expected successful updates per frame.
///
/// # Safety
/// `q` and `out_value` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_rho(q: *const FldaThroughputQuery, out_value: *mut f64) -> FldaStatus {
    guard(|| {
        let q = query(get(q, "q")?)?;
        *out(out_value, "out_value")? = analytic::rho(&q);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn flda_rho_flda(alpha: f64, rho_fd: f64, rho_fl: f64) -> f64 {
    analytic::rho_flda(alpha, rho_fd, rho_fl)
}

/// Expected number of active users among `num_users`.
#[no_mangle]
pub extern "C" fn flda_k_hat(num_users: usize, p_active: f64) -> f64 {
    analytic::k_hat(num_users, p_active)
}

/// Splits `bits` into `payload_bits` subpackets and codes them at rate `q`.
///
/// # Safety
/// `out_plan` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_subpacket_plan(
    bits: u64,
    payload_bits: u64,
    code_rate: f64,
    out_plan: *mut FldaSubpacketPlan,
) -> FldaStatus {
    guard(|| {
        let cfg = FrameConfig::new(1, 1.0, payload_bits, code_rate, 1.0)?;
        let p = subpacket_plan(bits, &cfg)?;
        *out(out_plan, "out_plan")? = FldaSubpacketPlan {
            bits: p.bits,
            info: p.info,
            total: p.total,
        };
        Ok(())
    })
}

/// Default configuration.
///
/// # Safety
/// `out_config` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_config_default(out_config: *mut *mut FldaConfig) -> FldaStatus {
    guard(|| {
        *out(out_config, "out_config")? = Box::into_raw(Box::new(FldaConfig(SimConfig::default())));
        Ok(())
    })
}

/// Parses a TOML configuration; missing keys take their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out_config` valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_config_from_toml(toml: *const c_char, out_config: *mut *mut FldaConfig) -> FldaStatus {
    guard(|| {
        let slot = out(out_config, "out_config")?;
        let cfg = SimConfig::parse(text(toml, "toml")?)?;
        *slot = Box::into_raw(Box::new(FldaConfig(cfg)));
        Ok(())
    })
}

/// Sets one `key` (e.g. `lambda` or `network.lambda`) from its TOML text.
/// The configuration is unchanged on failure.
///
/// # Safety
/// All pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_config_set(config: *mut FldaConfig, key: *const c_char, value: *const c_char) -> FldaStatus {
    guard(|| {
        let cfg = out(config, "config")?;
        let kv = (text(key, "key")?.to_string(), text(value, "value")?.to_string());
        cfg.0 = cfg.0.with_overrides(&[kv])?;
        Ok(())
    })
}

/// Serialises the configuration as TOML into `buf`. `out_len` receives the
/// length without the terminator; pass a null `buf` to query it.
///
/// # Safety
/// `buf` must hold `buf_len` bytes or be null; other pointers valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_config_to_toml(
    config: *const FldaConfig,
    buf: *mut c_char,
    buf_len: usize,
    out_len: *mut usize,
) -> FldaStatus {
    guard(|| {
        let s = get(config, "config")?.0.to_toml();
        *out(out_len, "out_len")? = s.len();
        if buf.is_null() {
            return Ok(());
        }
        if buf_len <= s.len() {
            return Err(Fail(FldaStatus::OutOfRange, format!("buffer needs {} bytes", s.len() + 1)));
        }
        ptr::copy_nonoverlapping(s.as_ptr().cast(), buf, s.len());
        *buf.add(s.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn flda_config_free(config: *mut FldaConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Builds a simulation (data, partition, devices) from a configuration.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_sim_new(config: *const FldaConfig, out_sim: *mut *mut FldaSim) -> FldaStatus {
    guard(|| {
        let slot = out(out_sim, "out_sim")?;
        let sim = Simulation::new(&get(config, "config")?.0)?;
        *slot = Box::into_raw(Box::new(FldaSim(sim)));
        Ok(())
    })
}

/// Runs one iteration, filling `out_report` if it is not null.
///
/// # Safety
/// `sim` must be valid or null; `out_report` valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_sim_step(sim: *mut FldaSim, out_report: *mut FldaIteration) -> FldaStatus {
    guard(|| {
        let r = out(sim, "sim")?.0.run_iteration()?;
        if let Some(o) = out_report.as_mut() {
            *o = FldaIteration {
                iteration: r.iteration,
                phase: phase_code(Some(r.phase)),
                slots: r.slots,
                committed: r.committed,
                received: r.received,
                broadcast_to: r.broadcast_to,
            };
        }
        Ok(())
    })
}

/// Runs to the configured budget and returns the evaluation trace.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_sim_run(sim: *mut FldaSim, out_trace: *mut *mut FldaTrace) -> FldaStatus {
    guard(|| {
        let slot = out(out_trace, "out_trace")?;
        let trace = out(sim, "sim")?.0.run()?;
        *slot = Box::into_raw(Box::new(FldaTrace(trace)));
        Ok(())
    })
}

/// Current evaluation point of a simulation.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_sim_metrics(sim: *const FldaSim, out_point: *mut FldaMetricsPoint) -> FldaStatus {
    guard(|| {
        let p = get(sim, "sim")?.0.metrics()?;
        *out(out_point, "out_point")? = point(&p);
        Ok(())
    })
}

/// Simulated seconds elapsed; negative if `sim` is null.
///
/// # Safety
/// `sim` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_sim_time(sim: *const FldaSim) -> f64 {
    sim.as_ref().map_or(-1.0, |s| s.0.time_s())
}

/// Whether every device's battery matches its income minus spending.
///
/// # Safety
/// `sim` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_sim_energy_conserved(sim: *const FldaSim) -> bool {
    sim.as_ref().is_some_and(|s| s.0.energy_conserved())
}

/// # Safety
/// `sim` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn flda_sim_free(sim: *mut FldaSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

fn point(p: &flda_core::MetricsPoint) -> FldaMetricsPoint {
    FldaMetricsPoint {
        time_s: p.time_s,
        iteration: p.iteration,
        phase: phase_code(p.phase),
        mean_accuracy: p.mean_accuracy,
        mean_battery: p.mean_battery,
        mean_energy_j: p.mean_energy_j,
        updates_received: p.updates_received,
    }
}

/// # Safety
/// `trace` must be valid or null; 0 for null.
#[no_mangle]
pub unsafe extern "C" fn flda_trace_len(trace: *const FldaTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.points.len())
}

/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn flda_trace_get(trace: *const FldaTrace, index: usize, out_point: *mut FldaMetricsPoint) -> FldaStatus {
    guard(|| {
        let t = get(trace, "trace")?;
        let p = t.0.points.get(index).ok_or_else(|| {
            Fail(FldaStatus::OutOfRange, format!("index {index} >= length {}", t.0.points.len()))
        })?;
        *out(out_point, "out_point")? = point(p);
        Ok(())
    })
}

/// # Safety
/// `trace` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn flda_trace_free(trace: *mut FldaTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}
