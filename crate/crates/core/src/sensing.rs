//! Network awareness.
//!
//! Two detection paths feed the proxy: transport errors raised while a
//! session is streaming (classified here into a disposition), and a periodic
//! poller that diffs the interface list against its previous snapshot. The
//! module also carries the detection-delay analytics for a poller with
//! interval `T` watching a Poisson stream of changes with rate `λ`, together
//! with a Monte Carlo estimator of the same quantity.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensingError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid interface descriptor `{id}`: {reason}")]
    InvalidDescriptor { id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct InterfaceId(pub String);

impl InterfaceId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for InterfaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for InterfaceId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl From<String> for InterfaceId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl From<&InterfaceId> for InterfaceId {
    fn from(id: &InterfaceId) -> Self {
        id.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterfaceKind {
    #[serde(alias = "cdma")]
    Cellular,
    Wlan,
    Ethernet,
}

impl fmt::Display for InterfaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cellular => "cellular",
            Self::Wlan => "wlan",
            Self::Ethernet => "ethernet",
        })
    }
}

/// One network attachment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceDescriptor {
    pub id: InterfaceId,
    pub kind: InterfaceKind,
    /// Bits per second.
    pub bandwidth_capacity: f64,
    pub cost_metric: u32,
    #[serde(default = "default_true")]
    pub available: bool,
    /// Round-trip latency in seconds.
    #[serde(default)]
    pub latency: f64,
}

fn default_true() -> bool {
    true
}

impl InterfaceDescriptor {
    pub fn new(
        id: impl Into<InterfaceId>,
        kind: InterfaceKind,
        bandwidth_capacity: f64,
        cost_metric: u32,
        latency: f64,
    ) -> Result<Self, SensingError> {
        let desc = Self {
            id: id.into(),
            kind,
            bandwidth_capacity,
            cost_metric,
            available: true,
            latency,
        };
        desc.validate()?;
        Ok(desc)
    }

    /// 144 kb/s cellular attachment, cost 5, 500 ms round trip.
    pub fn cdma(id: impl Into<InterfaceId>) -> Self {
        Self::new(id, InterfaceKind::Cellular, 144_000.0, 5, 0.5).expect("valid preset")
    }

    /// 11 Mb/s WLAN attachment, cost 2, 5 ms round trip.
    pub fn wlan(id: impl Into<InterfaceId>) -> Self {
        Self::new(id, InterfaceKind::Wlan, 11_000_000.0, 2, 0.005).expect("valid preset")
    }

    /// 10 Mb/s wired attachment, cost 1, 1 ms round trip.
    pub fn ethernet(id: impl Into<InterfaceId>) -> Self {
        Self::new(id, InterfaceKind::Ethernet, 10_000_000.0, 1, 0.001).expect("valid preset")
    }

    pub fn validate(&self) -> Result<(), SensingError> {
        let fail = |reason: &str| SensingError::InvalidDescriptor {
            id: self.id.to_string(),
            reason: reason.to_string(),
        };
        if self.id.0.is_empty() {
            return Err(fail("empty id"));
        }
        if !(self.bandwidth_capacity > 0.0) || !self.bandwidth_capacity.is_finite() {
            return Err(fail("bandwidth_capacity must be positive"));
        }
        if self.cost_metric < 1 {
            return Err(fail("cost_metric must be at least 1"));
        }
        if !(self.latency >= 0.0) || !self.latency.is_finite() {
            return Err(fail("latency must be non-negative"));
        }
        Ok(())
    }
}

/// Numeric code delivered by the transport layer. Failure codes use the
/// Winsock numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CauseCode(pub i32);

impl CauseCode {
    /// Session ran to end of stream.
    pub const COMPLETED: CauseCode = CauseCode(0);
    /// A higher-bandwidth network was found while streaming.
    pub const PREEMPTIVE_EVENT: CauseCode = CauseCode(20001);
}

/// Transport failures the proxy recovers from by handing off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    HostDown,
    ConnAborted,
    ConnReset,
    NetDown,
    NetUnreachable,
    NetReset,
    TryAgain,
    NoRecovery,
    AddrNotAvailable,
}

impl FailureCause {
    pub const ALL: [FailureCause; 9] = [
        Self::HostDown,
        Self::ConnAborted,
        Self::ConnReset,
        Self::NetDown,
        Self::NetUnreachable,
        Self::NetReset,
        Self::TryAgain,
        Self::NoRecovery,
        Self::AddrNotAvailable,
    ];

    pub fn code(self) -> CauseCode {
        CauseCode(match self {
            Self::HostDown => 10064,
            Self::ConnAborted => 10053,
            Self::ConnReset => 10054,
            Self::NetDown => 10050,
            Self::NetUnreachable => 10051,
            Self::NetReset => 10052,
            Self::TryAgain => 11002,
            Self::NoRecovery => 11003,
            Self::AddrNotAvailable => 10049,
        })
    }

    pub fn from_code(code: CauseCode) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.code() == code)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::HostDown => "host_down",
            Self::ConnAborted => "conn_aborted",
            Self::ConnReset => "conn_reset",
            Self::NetDown => "net_down",
            Self::NetUnreachable => "net_unreachable",
            Self::NetReset => "net_reset",
            Self::TryAgain => "try_again",
            Self::NoRecovery => "no_recovery",
            Self::AddrNotAvailable => "addr_not_available",
        }
    }

    /// Maps a socket error onto the failure taxonomy. Kinds with no direct
    /// counterpart are treated as an aborted connection.
    pub fn from_io(err: &std::io::Error) -> Self {
        use std::io::ErrorKind::*;
        match err.kind() {
            ConnectionReset => Self::ConnReset,
            ConnectionRefused | NotConnected => Self::HostDown,
            AddrNotAvailable => Self::AddrNotAvailable,
            TimedOut | WouldBlock | Interrupted => Self::TryAgain,
            _ => Self::ConnAborted,
        }
    }
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    RecoverableHandoff,
    Preemptive,
    Ignore,
}

pub fn classify_failure(code: CauseCode) -> Disposition {
    if code == CauseCode::PREEMPTIVE_EVENT {
        Disposition::Preemptive
    } else if FailureCause::from_code(code).is_some() {
        Disposition::RecoverableHandoff
    } else {
        Disposition::Ignore
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Connected,
    Disconnected,
    TransportFailure,
    PreemptiveCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEvent {
    pub kind: EventKind,
    pub cause: Option<FailureCause>,
    /// For `PreemptiveCandidate`, the candidate interface.
    pub interface_id: InterfaceId,
    pub timestamp: f64,
}

impl NetworkEvent {
    pub fn connected(id: impl Into<InterfaceId>, at: f64) -> Self {
        Self {
            kind: EventKind::Connected,
            cause: None,
            interface_id: id.into(),
            timestamp: at,
        }
    }

    pub fn disconnected(id: impl Into<InterfaceId>, at: f64) -> Self {
        Self {
            kind: EventKind::Disconnected,
            cause: None,
            interface_id: id.into(),
            timestamp: at,
        }
    }

    pub fn transport_failure(id: impl Into<InterfaceId>, cause: FailureCause, at: f64) -> Self {
        Self {
            kind: EventKind::TransportFailure,
            cause: Some(cause),
            interface_id: id.into(),
            timestamp: at,
        }
    }

    pub fn preemptive_candidate(candidate: impl Into<InterfaceId>, at: f64) -> Self {
        Self {
            kind: EventKind::PreemptiveCandidate,
            cause: None,
            interface_id: candidate.into(),
            timestamp: at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PollerConfig {
    /// Seconds between polls.
    pub interval: f64,
    /// Expected change rate per second, used only for analytics.
    pub change_rate: Option<f64>,
}

impl Default for PollerConfig {
    fn default() -> Self {
        Self {
            interval: 10.0,
            change_rate: None,
        }
    }
}

/// Diffs two interface snapshots: `connected` for every new id, then
/// `disconnected` for every vanished one, each in id order.
pub fn poll_once(current: &BTreeSet<InterfaceId>, previous: &BTreeSet<InterfaceId>, at: f64) -> Vec<NetworkEvent> {
    current
        .difference(previous)
        .map(|id| NetworkEvent::connected(id, at))
        .chain(previous.difference(current).map(|id| NetworkEvent::disconnected(id, at)))
        .collect()
}

/// Stateful poller remembering the last snapshot.
#[derive(Debug, Clone, Default)]
pub struct Poller {
    previous: BTreeSet<InterfaceId>,
}

impl Poller {
    pub fn new(initial: BTreeSet<InterfaceId>) -> Self {
        Self { previous: initial }
    }

    pub fn poll(&mut self, current: &BTreeSet<InterfaceId>, at: f64) -> Vec<NetworkEvent> {
        let events = poll_once(current, &self.previous, at);
        if !events.is_empty() {
            self.previous = current.clone();
        }
        events
    }

    pub fn snapshot(&self) -> &BTreeSet<InterfaceId> {
        &self.previous
    }
}

/// Handle to a background poller thread; stops on drop.
pub struct PollerHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl PollerHandle {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for PollerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Runs `source` every `interval` on a background thread and hands each
/// poll's events (possibly none) to `sink`.
pub fn spawn_poller<S, K>(interval: Duration, mut source: S, mut sink: K) -> PollerHandle
where
    S: FnMut() -> BTreeSet<InterfaceId> + Send + 'static,
    K: FnMut(Vec<NetworkEvent>) + Send + 'static,
{
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let mut poller = Poller::new(source());
    let thread = std::thread::spawn(move || {
        let started = std::time::Instant::now();
        // Sleep in short slices so shutdown is prompt.
        let slice = interval.min(Duration::from_millis(20)).max(Duration::from_millis(1));
        'outer: loop {
            let mut waited = Duration::ZERO;
            while waited < interval {
                if flag.load(Ordering::Acquire) {
                    break 'outer;
                }
                std::thread::sleep(slice);
                waited += slice;
            }
            let events = poller.poll(&source(), started.elapsed().as_secs_f64());
            sink(events);
        }
    });
    PollerHandle {
        stop,
        thread: Some(thread),
    }
}

/// Interfaces the host reports as operationally up, read from sysfs.
/// Returns an empty set where sysfs is unavailable.
pub fn system_interfaces() -> BTreeSet<InterfaceId> {
    let Ok(dir) = std::fs::read_dir("/sys/class/net") else {
        return BTreeSet::new();
    };
    dir.filter_map(|entry| entry.ok())
        .filter(|entry| {
            std::fs::read_to_string(entry.path().join("operstate"))
                .map(|s| matches!(s.trim(), "up" | "unknown"))
                .unwrap_or(false)
        })
        .map(|entry| InterfaceId(entry.file_name().to_string_lossy().into_owned()))
        .collect()
}

/// Polling interval and change intensity for the detection-delay model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub polling_interval: f64,
    pub change_rate: f64,
}

impl DelayModel {
    pub fn new(polling_interval: f64, change_rate: f64) -> Result<Self, SensingError> {
        check_positive("polling interval", polling_interval)?;
        check_positive("change rate", change_rate)?;
        Ok(Self {
            polling_interval,
            change_rate,
        })
    }

    /// Long-run mean detection delay bound,
    /// `((Tλ)² − 2Tλ + 2 − 2e^{−Tλ}) / (2Tλ²)`.
    pub fn bound(&self) -> f64 {
        let (t, l) = (self.polling_interval, self.change_rate);
        // Numerator equals −2·R₃(Tλ); the series form avoids cancellation.
        -exp_remainder(t * l, 3) / (t * l * l)
    }

    /// Expected delay at `tau` measured from the first change,
    /// `τ(1 − (1 − e^{−λτ})/(λτ))`.
    pub fn first_event_delay(&self, tau: f64) -> f64 {
        first_event_delay(tau, self.change_rate)
    }
}

fn check_positive(what: &str, v: f64) -> Result<(), SensingError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SensingError::Domain(format!("{what} must be positive and finite, got {v}")))
    }
}

/// `R_k(x) = e^{−x} − Σ_{j<k} (−x)^j / j!`, the Taylor remainder of `e^{−x}`.
fn exp_remainder(x: f64, k: u32) -> f64 {
    if x < 1.0 {
        let mut term: f64 = 1.0;
        for j in 1..=k {
            term *= -x / j as f64;
        }
        let mut sum: f64 = 0.0;
        let mut j = k;
        while term.abs() > f64::EPSILON * sum.abs() * 1e-3 && j < k + 60 {
            sum += term;
            j += 1;
            term *= -x / j as f64;
        }
        sum
    } else {
        let mut partial = 0.0;
        let mut term = 1.0;
        for j in 0..k {
            if j > 0 {
                term *= -x / j as f64;
            }
            partial += term;
        }
        (-x).exp() - partial
    }
}

fn first_event_delay(tau: f64, rate: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    exp_remainder(rate * tau, 2) / rate
}

pub fn delay_bound(polling_interval: f64, change_rate: f64) -> Result<f64, SensingError> {
    Ok(DelayModel::new(polling_interval, change_rate)?.bound())
}

/// Expected delay at `tau` measured from the `n`-th change, where the
/// arrival time of that change is gamma distributed:
/// `τ·P(N(τ) ≥ n) − (n/λ)·P(N(τ) ≥ n+1)`.
pub fn expected_delay_nth(n: u32, tau: f64, change_rate: f64) -> Result<f64, SensingError> {
    if n < 1 {
        return Err(SensingError::Domain("n must be at least 1".into()));
    }
    check_positive("tau", tau)?;
    check_positive("change rate", change_rate)?;
    if n == 1 {
        return Ok(first_event_delay(tau, change_rate));
    }
    let x = change_rate * tau;
    Ok(tau * poisson_tail(x, n) - n as f64 / change_rate * poisson_tail(x, n + 1))
}

/// `P(N ≥ n)` for `N ~ Poisson(x)`.
fn poisson_tail(x: f64, n: u32) -> f64 {
    if x < n as f64 {
        // Sum the upper tail directly; it is the small side.
        let mut log_term = -x + n as f64 * x.ln() - ln_factorial(n);
        let mut sum = 0.0;
        let mut i = n;
        loop {
            let term = log_term.exp();
            sum += term;
            if term < sum * 1e-17 || i > n + 10_000 {
                break;
            }
            i += 1;
            log_term += x.ln() - (i as f64).ln();
        }
        sum.min(1.0)
    } else {
        let mut term = (-x).exp();
        let mut lower = 0.0;
        for i in 0..n {
            if i > 0 {
                term *= x / i as f64;
            }
            lower += term;
        }
        (1.0 - lower).max(0.0)
    }
}

fn ln_factorial(n: u32) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Which change the delay at time `τ` is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayReference {
    /// `τ − S_{n(τ)}`: age of the most recent change.
    LastChange,
    /// `τ − S_1`: time since the first change in the cycle.
    FirstChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub cycles: u64,
}

/// Monte Carlo estimate of the long-run mean detection delay, measured from
/// the most recent undetected change. Before the first change of a cycle the
/// delay is zero.
pub fn simulate_detection_delay(
    polling_interval: f64,
    change_rate: f64,
    cycles: u64,
    seed: u64,
) -> Result<DelayEstimate, SensingError> {
    simulate_detection_delay_with(polling_interval, change_rate, cycles, seed, DelayReference::LastChange)
}

pub fn simulate_detection_delay_with(
    polling_interval: f64,
    change_rate: f64,
    cycles: u64,
    seed: u64,
    reference: DelayReference,
) -> Result<DelayEstimate, SensingError> {
    let model = DelayModel::new(polling_interval, change_rate)?;
    if cycles < 1 {
        return Err(SensingError::Domain("cycles must be at least 1".into()));
    }
    let t = model.polling_interval;
    let gaps = Exp::new(model.change_rate).map_err(|e| SensingError::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Welford over per-cycle time averages.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for c in 1..=cycles {
        let mut area = 0.0;
        let mut arrival: f64 = gaps.sample(&mut rng);
        if arrival <= t {
            match reference {
                DelayReference::FirstChange => {
                    area = 0.5 * (t - arrival).powi(2);
                    // Consume the rest of the cycle so streams stay aligned
                    // across reference modes.
                    while arrival <= t {
                        arrival += gaps.sample(&mut rng);
                    }
                }
                DelayReference::LastChange => loop {
                    let next = arrival + gaps.sample(&mut rng);
                    let seg_end = next.min(t);
                    area += 0.5 * (seg_end - arrival).powi(2);
                    if next > t {
                        break;
                    }
                    arrival = next;
                },
            }
        }
        let y = area / t;
        let delta = y - mean;
        mean += delta / c as f64;
        m2 += delta * (y - mean);
    }
    let n = cycles as f64;
    let stderr = if cycles > 1 { (m2 / (n - 1.0) / n).sqrt() } else { 0.0 };
    Ok(DelayEstimate { mean, stderr, cycles })
}
