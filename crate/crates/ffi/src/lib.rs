//! C bindings for `resumable_proxy`.
//!
//! Every fallible function returns an [`RpStatus`] and writes its result
//! through an out pointer. On failure, [`rp_last_error_message`] describes
//! what went wrong on the calling thread. Strings handed out by this library
//! are released with [`rp_string_free`]; handles with their matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use resumable_proxy::client_proxy::RecoveryMode;
use resumable_proxy::policy;
use resumable_proxy::protocol::{self, OriginRequest};
use resumable_proxy::sensing::{self, CauseCode, Disposition, InterfaceDescriptor, InterfaceId, InterfaceKind};
use resumable_proxy::simharness::{self, Scenario, SimRun, StackConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Protocol = 4,
    Scenario = 5,
    Simulation = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpDisposition {
    RecoverableHandoff = 0,
    Preemptive = 1,
    Ignore = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpInterfaceKind {
    Cellular = 0,
    Wlan = 1,
    Ethernet = 2,
}

/// Interface description for [`rp_should_preempt`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RpInterface {
    /// NUL-terminated identifier.
    pub id: *const c_char,
    pub kind: RpInterfaceKind,
    /// Bits per second.
    pub bandwidth_capacity: f64,
    pub cost_metric: u32,
    /// Round-trip latency in seconds.
    pub latency: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RpHandoffDecision {
    pub preempt: bool,
    pub est_remaining_current: f64,
    pub est_remaining_candidate: f64,
    pub est_handoff_time: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RpDelayEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub cycles: u64,
}

/// Parsed gateway request. Both strings are owned by the caller afterwards
/// and released with [`rp_gateway_request_clear`].
#[repr(C)]
#[derive(Debug)]
pub struct RpGatewayRequest {
    pub gateway_base: *mut c_char,
    pub origin_url: *mut c_char,
    pub session_offset: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RpStackConfig {
    pub preemption: bool,
    /// Seconds between interface polls.
    pub poll_interval: f64,
    pub workers: u32,
    /// Restart from byte 0 on every attempt instead of resuming.
    pub session_level: bool,
    /// Failures tolerated per transfer; negative means unlimited.
    pub retry_budget: i64,
}

/// Opaque scenario handle.
pub struct RpScenario(Scenario);

/// Opaque handle to the results of one simulation run.
pub struct RpReport(SimRun);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(RpStatus, String);

impl Failure {
    fn new(status: RpStatus, msg: impl ToString) -> Self {
        Self(status, msg.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> Outcome<()>) -> RpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RpStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return Err(Failure::new(RpStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(RpStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Outcome<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| Failure::new(RpStatus::NullPointer, format!("{what} is null")))
}

fn c_string(s: String) -> Outcome<*mut c_char> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(RpStatus::InvalidArgument, "string contains NUL"))
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn rp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn rp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds the gateway request block for fetching `origin_url` from `offset`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_rewrite_request(
    origin_url: *const c_char,
    gateway_base: *const c_char,
    offset: u64,
    out_request: *mut *mut c_char,
) -> RpStatus {
    guard(|| {
        let url = text(origin_url, "origin_url")?;
        let base = text(gateway_base, "gateway_base")?;
        let slot = out(out_request, "out_request")?;
        let wire = protocol::rewrite_request(&OriginRequest::get(url), base, offset)
            .map_err(|e| Failure::new(RpStatus::Protocol, e))?;
        *slot = c_string(wire)?;
        Ok(())
    })
}

/// Parses a gateway request block into `out_request`.
///
/// # Safety
/// `raw` must be NUL-terminated; `out_request` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_parse_gateway_request(raw: *const c_char, out_request: *mut RpGatewayRequest) -> RpStatus {
    guard(|| {
        let raw = text(raw, "raw")?;
        let slot = out(out_request, "out_request")?;
        let req = protocol::parse_gateway_request(raw).map_err(|e| Failure::new(RpStatus::Protocol, e))?;
        let base = c_string(req.gateway_base)?;
        let url = match c_string(req.origin_url) {
            Ok(u) => u,
            Err(e) => {
                rp_string_free(base);
                return Err(e);
            }
        };
        *slot = RpGatewayRequest {
            gateway_base: base,
            origin_url: url,
            session_offset: req.session_offset,
        };
        Ok(())
    })
}

/// Frees the strings inside `request` and nulls them.
///
/// # Safety
/// `request` must be NULL or filled by [`rp_parse_gateway_request`].
#[no_mangle]
pub unsafe extern "C" fn rp_gateway_request_clear(request: *mut RpGatewayRequest) {
    if let Some(r) = request.as_mut() {
        rp_string_free(r.gateway_base);
        rp_string_free(r.origin_url);
        r.gateway_base = ptr::null_mut();
        r.origin_url = ptr::null_mut();
    }
}

/// Upper bound on the mean detection delay for polling interval `t` and
/// change rate `lambda`.
///
/// # Safety
/// `out_bound` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_delay_bound(t: f64, lambda: f64, out_bound: *mut f64) -> RpStatus {
    guard(|| {
        let slot = out(out_bound, "out_bound")?;
        *slot = sensing::delay_bound(t, lambda).map_err(|e| Failure::new(RpStatus::InvalidArgument, e))?;
        Ok(())
    })
}

/// Expected delay at time `tau` measured from the `n`th change.
///
/// # Safety
/// `out_delay` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_expected_delay_nth(n: u32, tau: f64, lambda: f64, out_delay: *mut f64) -> RpStatus {
    guard(|| {
        let slot = out(out_delay, "out_delay")?;
        *slot = sensing::expected_delay_nth(n, tau, lambda).map_err(|e| Failure::new(RpStatus::InvalidArgument, e))?;
        Ok(())
    })
}

/// Monte Carlo estimate of the mean detection delay.
///
/// # Safety
/// `out_estimate` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_simulate_detection_delay(
    t: f64,
    lambda: f64,
    cycles: u64,
    seed: u64,
    out_estimate: *mut RpDelayEstimate,
) -> RpStatus {
    guard(|| {
        let slot = out(out_estimate, "out_estimate")?;
        let est = sensing::simulate_detection_delay(t, lambda, cycles, seed)
            .map_err(|e| Failure::new(RpStatus::InvalidArgument, e))?;
        *slot = RpDelayEstimate {
            mean: est.mean,
            std_error: est.stderr,
            cycles: est.cycles,
        };
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn rp_classify_failure(code: i32) -> RpDisposition {
    match sensing::classify_failure(CauseCode(code)) {
        Disposition::RecoverableHandoff => RpDisposition::RecoverableHandoff,
        Disposition::Preemptive => RpDisposition::Preemptive,
        Disposition::Ignore => RpDisposition::Ignore,
    }
}

unsafe fn descriptor(p: *const RpInterface, what: &str) -> Outcome<InterfaceDescriptor> {
    let i = p
        .as_ref()
        .ok_or_else(|| Failure::new(RpStatus::NullPointer, format!("{what} is null")))?;
    let kind = match i.kind {
        RpInterfaceKind::Cellular => InterfaceKind::Cellular,
        RpInterfaceKind::Wlan => InterfaceKind::Wlan,
        RpInterfaceKind::Ethernet => InterfaceKind::Ethernet,
    };
    let id = text(i.id, what)?;
    InterfaceDescriptor::new(InterfaceId::from(id), kind, i.bandwidth_capacity, i.cost_metric, i.latency)
        .map_err(|e| Failure::new(RpStatus::InvalidArgument, e))
}

/// Decides whether to abandon `current` for `candidate` with
/// `remaining_bytes` still to fetch.
///
/// # Safety
/// Pointers must be valid; interface ids must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rp_should_preempt(
    remaining_bytes: u64,
    current: *const RpInterface,
    candidate: *const RpInterface,
    est_handoff_time: f64,
    out_decision: *mut RpHandoffDecision,
) -> RpStatus {
    guard(|| {
        let cur = descriptor(current, "current")?;
        let cand = descriptor(candidate, "candidate")?;
        let slot = out(out_decision, "out_decision")?;
        if !(est_handoff_time >= 0.0 && est_handoff_time.is_finite()) {
            return Err(Failure::new(RpStatus::InvalidArgument, "est_handoff_time must be non-negative"));
        }
        let d = policy::should_preempt(remaining_bytes, &cur, &cand, est_handoff_time);
        *slot = RpHandoffDecision {
            preempt: d.preempt,
            est_remaining_current: d.est_remaining_current,
            est_remaining_candidate: d.est_remaining_candidate,
            est_handoff_time: d.est_handoff_time,
        };
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn rp_stack_config_default() -> RpStackConfig {
    let d = StackConfig::default();
    RpStackConfig {
        preemption: d.preemption,
        poll_interval: d.poll_interval,
        workers: d.workers as u32,
        session_level: d.recovery == RecoveryMode::SessionLevel,
        retry_budget: d.retry_budget.map_or(-1, i64::from),
    }
}

fn stack_config(c: &RpStackConfig) -> Outcome<StackConfig> {
    let retry_budget = match c.retry_budget {
        b if b < 0 => None,
        b => Some(u32::try_from(b).map_err(|_| Failure::new(RpStatus::InvalidArgument, "retry_budget too large"))?),
    };
    Ok(StackConfig {
        preemption: c.preemption,
        poll_interval: c.poll_interval,
        workers: c.workers as usize,
        recovery: if c.session_level {
            RecoveryMode::SessionLevel
        } else {
            RecoveryMode::PacketLevel
        },
        retry_budget,
    })
}

fn give(slot: &mut *mut RpScenario, sc: Scenario) -> Outcome<()> {
    sc.validate().map_err(|e| Failure::new(RpStatus::Scenario, e))?;
    *slot = Box::into_raw(Box::new(RpScenario(sc)));
    Ok(())
}

/// Loads a scenario from a TOML file.
///
/// # Safety
/// `path` must be NUL-terminated; `out_scenario` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_scenario_load(path: *const c_char, out_scenario: *mut *mut RpScenario) -> RpStatus {
    guard(|| {
        let path = text(path, "path")?;
        let slot = out(out_scenario, "out_scenario")?;
        give(slot, Scenario::load(path).map_err(|e| Failure::new(RpStatus::Scenario, e))?)
    })
}

/// Parses a scenario from TOML text.
///
/// # Safety
/// `toml` must be NUL-terminated; `out_scenario` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_scenario_parse(toml: *const c_char, out_scenario: *mut *mut RpScenario) -> RpStatus {
    guard(|| {
        let toml = text(toml, "toml")?;
        let slot = out(out_scenario, "out_scenario")?;
        give(slot, Scenario::parse(toml).map_err(|e| Failure::new(RpStatus::Scenario, e))?)
    })
}

/// Looks up a built-in scenario by name.
///
/// # Safety
/// `name` must be NUL-terminated; `out_scenario` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_scenario_canned(name: *const c_char, out_scenario: *mut *mut RpScenario) -> RpStatus {
    guard(|| {
        let name = text(name, "name")?;
        let slot = out(out_scenario, "out_scenario")?;
        let sc = Scenario::canned(name)
            .ok_or_else(|| Failure::new(RpStatus::Scenario, format!("no built-in scenario named {name}")))?;
        give(slot, sc)
    })
}

/// # Safety
/// `scenario` must be NULL or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn rp_scenario_free(scenario: *mut RpScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Runs `scenario`. A NULL `config` means [`rp_stack_config_default`].
///
/// # Safety
/// `scenario` must be a live handle; `out_report` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_scenario_run(
    scenario: *const RpScenario,
    config: *const RpStackConfig,
    seed: u64,
    out_report: *mut *mut RpReport,
) -> RpStatus {
    guard(|| {
        let sc = scenario
            .as_ref()
            .ok_or_else(|| Failure::new(RpStatus::NullPointer, "scenario is null"))?;
        let slot = out(out_report, "out_report")?;
        let cfg = match config.as_ref() {
            Some(c) => stack_config(c)?,
            None => StackConfig::default(),
        };
        let run = simharness::run_scenario(&sc.0, &cfg, seed).map_err(|e| Failure::new(RpStatus::Simulation, e))?;
        *slot = Box::into_raw(Box::new(RpReport(run)));
        Ok(())
    })
}

/// Number of transfers in the report; 0 for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_report_transfer_count(report: *const RpReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.transfers.len())
}

/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_report_all_completed(report: *const RpReport) -> bool {
    report.as_ref().is_some_and(|r| r.0.all_completed())
}

unsafe fn render(report: *const RpReport, dst: *mut *mut c_char, f: fn(&SimRun) -> String) -> RpStatus {
    guard(|| {
        let r = report
            .as_ref()
            .ok_or_else(|| Failure::new(RpStatus::NullPointer, "report is null"))?;
        let slot = out(dst, "out_text")?;
        *slot = c_string(f(&r.0))?;
        Ok(())
    })
}

/// Per-transfer metrics as CSV. Free the result with [`rp_string_free`].
///
/// # Safety
/// `report` must be a live handle; `out_text` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_report_to_csv(report: *const RpReport, out_text: *mut *mut c_char) -> RpStatus {
    render(report, out_text, |r| simharness::to_csv(&r.transfers))
}

/// Per-transfer metrics as a JSON array. Free the result with
/// [`rp_string_free`].
///
/// # Safety
/// `report` must be a live handle; `out_text` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_report_to_json(report: *const RpReport, out_text: *mut *mut c_char) -> RpStatus {
    render(report, out_text, |r| simharness::to_json(&r.transfers))
}

/// # Safety
/// `report` must be NULL or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn rp_report_free(report: *mut RpReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
