//! Mobile-host side of the split connection.
//!
//! Every browser request becomes a session with a persistent local leg and a
//! disposable remote leg. The [`SessionManager`] owns all session records and
//! the FIFO task queue; it is a plain single-owner structure, so concurrent
//! users wrap it in a mutex and the simulator drives it directly.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{select_interface, should_preempt_with, HandoffDecision, HandoffHistory, PolicyParams};
use crate::protocol::{rewrite_request, OriginRequest, ProtocolError, ResponseHead, Splicer};
use crate::sensing::{classify_failure, CauseCode, Disposition, FailureCause, InterfaceDescriptor, InterfaceId};

pub const DEFAULT_WORKERS: usize = 4;
pub const DEFAULT_GATEWAY_BASE: &str = "http://127.0.0.1:8081/scripts/dis.dll";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Queued,
    Active,
    Interrupted,
    Completed,
    Failed,
}

/// How a retry chooses its starting offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// Resume from the last delivered byte.
    #[default]
    PacketLevel,
    /// Restart from byte 0 on every retry; bytes already held are dropped as
    /// duplicates.
    SessionLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub workers: usize,
    /// Failures tolerated per session; `None` retries forever.
    pub retry_budget: Option<u32>,
    pub gateway_base: String,
    pub recovery: RecoveryMode,
    /// Keep delivered bytes in the record (needed for byte-equality checks).
    pub retain_payload: bool,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            workers: DEFAULT_WORKERS,
            retry_budget: None,
            gateway_base: DEFAULT_GATEWAY_BASE.to_string(),
            recovery: RecoveryMode::PacketLevel,
            retain_payload: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProxyError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {id} is {state:?}, cannot {op}")]
    InvalidState {
        id: SessionId,
        state: SessionState,
        op: &'static str,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// How a remote-leg run ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Preemptive { candidate: InterfaceId },
    TransportFailure(FailureCause),
    Unrecognized(CauseCode),
}

impl Outcome {
    /// Builds an outcome from a raw transport code.
    pub fn from_code(code: CauseCode, candidate: Option<InterfaceId>) -> Self {
        if code == CauseCode::COMPLETED {
            return Self::Completed;
        }
        match (classify_failure(code), candidate) {
            (Disposition::Preemptive, Some(candidate)) => Self::Preemptive { candidate },
            (Disposition::RecoverableHandoff, _) => {
                Self::TransportFailure(FailureCause::from_code(code).expect("classified as recoverable"))
            }
            _ => Self::Unrecognized(code),
        }
    }

    pub fn code(&self) -> CauseCode {
        match self {
            Self::Completed => CauseCode::COMPLETED,
            Self::Preemptive { .. } => CauseCode::PREEMPTIVE_EVENT,
            Self::TransportFailure(cause) => cause.code(),
            Self::Unrecognized(code) => *code,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingAction {
    /// Session finished; its worker is free.
    Release,
    /// Back at the tail of the queue. `await_event` sessions sit out until a
    /// connect, preemptive or poll event releases them.
    Requeue { await_event: bool },
    /// Retry budget exhausted; local leg closed with an error.
    Fail,
    /// Unrecognized outcome; nothing changes.
    Continue,
}

/// Bookkeeping for one HTTP session.
#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub session_id: SessionId,
    pub request: OriginRequest,
    pub bytes_delivered: u64,
    pub state: SessionState,
    pub created_at: f64,
    pub last_progress_at: f64,
    pub current_interface: Option<InterfaceId>,
    pub total_size: Option<u64>,
    pub attempts: u32,
    pub failures: u32,
    pub preemptions: u32,
    pub local_closed_early: bool,
    /// First successful response head, as forwarded to the local leg.
    pub head: Option<ResponseHead>,
    pub history: Vec<SessionState>,
    attempt_start: u64,
    attempt_received: u64,
    awaiting_event: bool,
    splicer: Splicer,
}

impl SessionRecord {
    pub fn origin_url(&self) -> &str {
        &self.request.url
    }

    /// Offset requested for the current (or last) attempt.
    pub fn attempt_offset(&self) -> u64 {
        self.attempt_start
    }

    /// Stream position of the current attempt: its start offset plus the
    /// bytes received on it so far.
    pub fn attempt_position(&self) -> u64 {
        self.attempt_start + self.attempt_received
    }

    pub fn remaining(&self) -> Option<u64> {
        self.total_size.map(|t| t.saturating_sub(self.bytes_delivered))
    }

    pub fn content(&self) -> Option<&[u8]> {
        self.splicer.content()
    }

    pub fn duplicate_bytes(&self) -> u64 {
        self.splicer.duplicate_bytes()
    }

    pub fn is_waiting_for_event(&self) -> bool {
        self.awaiting_event
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, SessionState::Completed | SessionState::Failed)
    }

    fn set_state(&mut self, state: SessionState) {
        self.state = state;
        self.history.push(state);
    }
}

/// FIFO of queued session ids with a fixed worker count.
#[derive(Debug, Clone)]
pub struct TaskQueue {
    pending: VecDeque<SessionId>,
    workers: usize,
}

impl TaskQueue {
    pub fn new(workers: usize) -> Self {
        Self {
            pending: VecDeque::new(),
            workers: workers.max(1),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn contains(&self, id: SessionId) -> bool {
        self.pending.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.pending.iter().copied()
    }

    fn push_back(&mut self, id: SessionId) {
        if !self.contains(id) {
            self.pending.push_back(id);
        }
    }

    fn remove(&mut self, id: SessionId) {
        self.pending.retain(|&p| p != id);
    }

    fn pop_first(&mut self, mut pred: impl FnMut(SessionId) -> bool) -> Option<SessionId> {
        let pos = self.pending.iter().position(|&id| pred(id))?;
        self.pending.remove(pos)
    }
}

/// Bytes newly accepted from a delivered chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    /// Index in the chunk where fresh bytes begin.
    pub skip: usize,
    pub fresh: usize,
    pub duplicate: usize,
}

#[derive(Debug)]
pub struct SessionManager {
    config: ProxyConfig,
    next_id: u64,
    records: BTreeMap<SessionId, SessionRecord>,
    queue: TaskQueue,
    active: BTreeSet<SessionId>,
}

impl SessionManager {
    pub fn new(config: ProxyConfig) -> Self {
        let queue = TaskQueue::new(config.workers);
        Self {
            config,
            next_id: 1,
            records: BTreeMap::new(),
            queue,
            active: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    pub fn queue(&self) -> &TaskQueue {
        &self.queue
    }

    pub fn record(&self, id: SessionId) -> Option<&SessionRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &SessionRecord> {
        self.records.values()
    }

    pub fn active_sessions(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.active.iter().copied()
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn has_capacity(&self) -> bool {
        self.active.len() < self.queue.workers()
    }

    /// Registers a new session at the tail of the queue.
    pub fn accept_request(&mut self, request: OriginRequest, now: f64) -> Result<SessionId, ProtocolError> {
        request.validate()?;
        let id = SessionId(self.next_id);
        self.next_id += 1;
        let record = SessionRecord {
            session_id: id,
            request,
            bytes_delivered: 0,
            state: SessionState::Queued,
            created_at: now,
            last_progress_at: now,
            current_interface: None,
            total_size: None,
            attempts: 0,
            failures: 0,
            preemptions: 0,
            local_closed_early: false,
            head: None,
            history: vec![SessionState::Queued],
            attempt_start: 0,
            attempt_received: 0,
            awaiting_event: false,
            splicer: Splicer::new(self.config.retain_payload),
        };
        self.records.insert(id, record);
        self.queue.push_back(id);
        Ok(id)
    }

    pub fn accept_raw(&mut self, raw: &str, now: f64) -> Result<SessionId, ProtocolError> {
        self.accept_request(OriginRequest::parse(raw)?, now)
    }

    /// Pops the first queued session that is not waiting for an event, if a
    /// worker is free. The caller must follow up with [`Self::begin_attempt`].
    pub fn next_runnable(&mut self) -> Option<SessionId> {
        if !self.has_capacity() {
            return None;
        }
        let records = &self.records;
        self.queue
            .pop_first(|id| records.get(&id).is_some_and(|r| !r.awaiting_event))
    }

    /// Starts a remote-leg attempt over `iface` and returns the gateway
    /// request text.
    pub fn begin_attempt(&mut self, id: SessionId, iface: &InterfaceDescriptor, now: f64) -> Result<String, ProxyError> {
        let gateway_base = self.config.gateway_base.clone();
        let recovery = self.config.recovery;
        let rec = self.records.get_mut(&id).ok_or(ProxyError::UnknownSession(id))?;
        if rec.state != SessionState::Queued {
            return Err(ProxyError::InvalidState {
                id,
                state: rec.state,
                op: "begin attempt",
            });
        }
        let offset = match recovery {
            RecoveryMode::PacketLevel => rec.bytes_delivered,
            RecoveryMode::SessionLevel => 0,
        };
        let request = rewrite_request(&rec.request, &gateway_base, offset)?;
        rec.set_state(SessionState::Active);
        rec.current_interface = Some(iface.id.clone());
        rec.attempts += 1;
        rec.attempt_start = offset;
        rec.attempt_received = 0;
        rec.awaiting_event = false;
        rec.last_progress_at = now;
        self.queue.remove(id);
        self.active.insert(id);
        Ok(request)
    }

    /// Records the relay head of the current attempt. Returns the head to
    /// forward to the local leg the first time one arrives.
    pub fn on_response_head(&mut self, id: SessionId, head: &ResponseHead) -> Result<Option<ResponseHead>, ProxyError> {
        let rec = self.active_record(id, "accept response head")?;
        if let Some(len) = head.content_length() {
            rec.total_size = Some(rec.attempt_start + len);
        }
        if rec.head.is_some() {
            return Ok(None);
        }
        let mut forwarded = head.clone();
        if let Some(total) = rec.total_size {
            forwarded.set_header("Content-Length", total.to_string());
        }
        rec.head = Some(forwarded.clone());
        Ok(Some(forwarded))
    }

    /// Accounts a chunk of entity bytes received on the current attempt.
    pub fn deliver(&mut self, id: SessionId, chunk: &[u8], now: f64) -> Result<Delivery, ProxyError> {
        let rec = self.active_record(id, "deliver")?;
        let accepted = rec.splicer.push(rec.attempt_position(), chunk)?;
        rec.attempt_received += chunk.len() as u64;
        rec.bytes_delivered = rec.splicer.end();
        if accepted.fresh > 0 {
            rec.last_progress_at = now;
        }
        Ok(Delivery {
            skip: accepted.skip,
            fresh: accepted.fresh,
            duplicate: accepted.duplicate,
        })
    }

    /// Applies a run outcome and returns what the scheduler should do next.
    pub fn handle_outcome(&mut self, id: SessionId, outcome: &Outcome, now: f64) -> Result<SchedulingAction, ProxyError> {
        let budget = self.config.retry_budget;
        let rec = self.active_record(id, "handle outcome")?;
        let outcome = match outcome {
            Outcome::Completed if rec.remaining().is_some_and(|r| r > 0) => {
                Outcome::TransportFailure(FailureCause::ConnAborted)
            }
            other => other.clone(),
        };
        let action = match outcome {
            Outcome::Unrecognized(_) => return Ok(SchedulingAction::Continue),
            Outcome::Completed => {
                rec.set_state(SessionState::Completed);
                rec.last_progress_at = now;
                SchedulingAction::Release
            }
            Outcome::Preemptive { .. } => {
                rec.preemptions += 1;
                rec.set_state(SessionState::Interrupted);
                rec.set_state(SessionState::Queued);
                rec.awaiting_event = false;
                SchedulingAction::Requeue { await_event: false }
            }
            Outcome::TransportFailure(_) => {
                rec.failures += 1;
                rec.set_state(SessionState::Interrupted);
                if budget.is_some_and(|b| rec.failures > b) {
                    rec.set_state(SessionState::Failed);
                    rec.local_closed_early = true;
                    SchedulingAction::Fail
                } else {
                    rec.set_state(SessionState::Queued);
                    rec.awaiting_event = true;
                    SchedulingAction::Requeue { await_event: true }
                }
            }
        };
        self.active.remove(&id);
        if let SchedulingAction::Requeue { .. } = action {
            self.queue.push_back(id);
        }
        Ok(action)
    }

    /// Marks an active session failed regardless of budget, e.g. when the
    /// browser hung up.
    pub fn abort(&mut self, id: SessionId) -> Result<(), ProxyError> {
        let rec = self.records.get_mut(&id).ok_or(ProxyError::UnknownSession(id))?;
        if rec.is_terminal() {
            return Ok(());
        }
        rec.set_state(SessionState::Failed);
        rec.local_closed_early = true;
        self.active.remove(&id);
        self.queue.remove(id);
        Ok(())
    }

    /// Lets every session that sat out for an event run again. Returns how
    /// many were released.
    pub fn release_waiting(&mut self) -> usize {
        let mut n = 0;
        for id in self.queue.iter().collect::<Vec<_>>() {
            if let Some(rec) = self.records.get_mut(&id) {
                if rec.awaiting_event {
                    rec.awaiting_event = false;
                    n += 1;
                }
            }
        }
        n
    }

    /// Completed, never closed early, and every byte of the resource was
    /// delivered in order.
    pub fn user_perceived_continuity(&self, id: SessionId) -> bool {
        self.records.get(&id).is_some_and(|r| {
            r.state == SessionState::Completed
                && !r.local_closed_early
                && r.total_size.map_or(true, |t| t == r.bytes_delivered)
        })
    }

    /// Evaluates the handoff rule for every active session whose attachment
    /// is not the one the selector would pick from `view`.
    pub fn preemption_candidates<F>(
        &self,
        view: &[InterfaceDescriptor],
        history: &HandoffHistory,
        params: &PolicyParams,
        effective_bandwidth: F,
    ) -> Vec<(SessionId, HandoffDecision)>
    where
        F: Fn(&InterfaceDescriptor) -> f64,
    {
        let Ok(best) = select_interface(view) else {
            return Vec::new();
        };
        self.active
            .iter()
            .filter_map(|&id| {
                let rec = self.records.get(&id)?;
                let remaining = rec.remaining()?;
                let current_id = rec.current_interface.as_ref()?;
                if *current_id == best.id {
                    return None;
                }
                let current = view.iter().find(|d| &d.id == current_id)?;
                let handoff = history.estimate(current.kind, best.kind, params);
                Some((id, should_preempt_with(remaining, current, best, handoff, &effective_bandwidth)))
            })
            .collect()
    }

    fn active_record(&mut self, id: SessionId, op: &'static str) -> Result<&mut SessionRecord, ProxyError> {
        let rec = self.records.get_mut(&id).ok_or(ProxyError::UnknownSession(id))?;
        if rec.state != SessionState::Active {
            return Err(ProxyError::InvalidState {
                id,
                state: rec.state,
                op,
            });
        }
        Ok(rec)
    }
}

/// Opens remote legs over a given attachment.
pub trait RemoteTransport {
    fn open(
        &mut self,
        iface: &InterfaceDescriptor,
        request: &str,
    ) -> Result<(ResponseHead, Box<dyn RemoteStream + '_>), FailureCause>;
}

pub trait RemoteStream {
    /// Reads entity bytes; `Ok(0)` is end of stream.
    fn read_chunk(&mut self, buf: &mut [u8]) -> Result<usize, FailureCause>;
}

/// The browser-facing connection.
pub trait LocalLeg {
    fn send_head(&mut self, head: &ResponseHead) -> std::io::Result<()>;
    fn send_body(&mut self, bytes: &[u8]) -> std::io::Result<()>;
}

/// Local leg that keeps everything in memory.
#[derive(Debug, Default, Clone)]
pub struct BufferedLeg {
    pub head: Option<ResponseHead>,
    pub body: Vec<u8>,
}

impl LocalLeg for BufferedLeg {
    fn send_head(&mut self, head: &ResponseHead) -> std::io::Result<()> {
        self.head = Some(head.clone());
        Ok(())
    }

    fn send_body(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.body.extend_from_slice(bytes);
        Ok(())
    }
}

/// Chunk size for remote reads.
const READ_CHUNK: usize = 16 * 1024;

/// Runs one remote-leg attempt for a queued session: issues the offset
/// request over `iface`, streams entity bytes to the local leg and returns
/// how the attempt ended. `preempt` is consulted after every chunk and
/// returns the candidate interface when a better network has appeared.
///
/// The lock is held only for bookkeeping, never across I/O.
pub fn run_session<T, P>(
    proxy: &Mutex<SessionManager>,
    id: SessionId,
    iface: &InterfaceDescriptor,
    transport: &mut T,
    local: &mut dyn LocalLeg,
    mut preempt: P,
    clock: &dyn Fn() -> f64,
) -> Result<Outcome, ProxyError>
where
    T: RemoteTransport + ?Sized,
    P: FnMut(&SessionRecord) -> Option<InterfaceId>,
{
    let lock = || proxy.lock().unwrap_or_else(|e| e.into_inner());
    let request = lock().begin_attempt(id, iface, clock())?;

    let (head, mut stream) = match transport.open(iface, &request) {
        Ok(opened) => opened,
        Err(cause) => return Ok(Outcome::TransportFailure(cause)),
    };
    if let Some(forward) = lock().on_response_head(id, &head)? {
        if local.send_head(&forward).is_err() {
            lock().abort(id)?;
            return Ok(Outcome::TransportFailure(FailureCause::ConnAborted));
        }
    }

    let mut buf = vec![0u8; READ_CHUNK];
    loop {
        let n = match stream.read_chunk(&mut buf) {
            Ok(0) => return Ok(Outcome::Completed),
            Ok(n) => n,
            Err(cause) => return Ok(Outcome::TransportFailure(cause)),
        };
        let (delivery, candidate) = {
            let mut guard = lock();
            let delivery = guard.deliver(id, &buf[..n], clock())?;
            let candidate = guard.record(id).and_then(&mut preempt);
            (delivery, candidate)
        };
        if delivery.fresh > 0
            && local
                .send_body(&buf[delivery.skip..delivery.skip + delivery.fresh])
                .is_err()
        {
            // Browser went away; nothing left to preserve.
            lock().abort(id)?;
            return Ok(Outcome::TransportFailure(FailureCause::ConnAborted));
        }
        if let Some(candidate) = candidate {
            return Ok(Outcome::Preemptive { candidate });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::parse_gateway_request;

    const URL: &str = "http://www.cnn.com/draft.ppt";

    fn manager(workers: usize, budget: Option<u32>) -> SessionManager {
        SessionManager::new(ProxyConfig {
            workers,
            retry_budget: budget,
            gateway_base: "http://205.132.6.11/scripts/dis.dll".into(),
            ..ProxyConfig::default()
        })
    }

    fn content(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i * 31 % 251) as u8).collect()
    }

    /// Serves `data[offset..]`, optionally cutting the stream once the total
    /// position reaches a failure point.
    struct ScriptedTransport {
        data: Vec<u8>,
        fail_at: Vec<u64>,
        opened: Vec<u64>,
    }

    struct ScriptedStream<'a> {
        data: &'a [u8],
        pos: u64,
        fail_at: Option<u64>,
    }

    impl RemoteTransport for ScriptedTransport {
        fn open(
            &mut self,
            _iface: &InterfaceDescriptor,
            request: &str,
        ) -> Result<(ResponseHead, Box<dyn RemoteStream + '_>), FailureCause> {
            let req = parse_gateway_request(request).unwrap();
            self.opened.push(req.session_offset);
            let offset = req.session_offset;
            let fail_at = if self.fail_at.first().is_some_and(|&f| f > offset) {
                Some(self.fail_at.remove(0))
            } else {
                None
            };
            let mut head = ResponseHead::new(200, "OK");
            head.set_header("Content-Length", (self.data.len() as u64 - offset).to_string());
            Ok((
                head,
                Box::new(ScriptedStream {
                    data: &self.data,
                    pos: offset,
                    fail_at,
                }),
            ))
        }
    }

    impl RemoteStream for ScriptedStream<'_> {
        fn read_chunk(&mut self, buf: &mut [u8]) -> Result<usize, FailureCause> {
            let limit = self.fail_at.unwrap_or(self.data.len() as u64);
            if self.pos >= limit {
                return if self.fail_at.is_some() {
                    Err(FailureCause::ConnReset)
                } else {
                    Ok(0)
                };
            }
            let n = buf.len().min((limit - self.pos) as usize).min(7_001);
            buf[..n].copy_from_slice(&self.data[self.pos as usize..self.pos as usize + n]);
            self.pos += n as u64;
            Ok(n)
        }
    }

    fn clock() -> f64 {
        0.0
    }

    #[test]
    fn accept_creates_queued_records() {
        let mut m = manager(4, None);
        let a = m.accept_request(OriginRequest::get(URL), 0.0).unwrap();
        let b = m.accept_request(OriginRequest::get(URL), 0.0).unwrap();
        assert_ne!(a, b);
        let rec = m.record(a).unwrap();
        assert_eq!(rec.state, SessionState::Queued);
        assert_eq!(rec.bytes_delivered, 0);
        assert_eq!(m.queue().iter().collect::<Vec<_>>(), vec![a, b]);
    }

    #[test]
    fn malformed_request_creates_nothing() {
        let mut m = manager(4, None);
        assert!(m.accept_raw("POST http://a/b HTTP/1.0\r\n\r\n", 0.0).is_err());
        assert!(m.accept_raw("GET /relative HTTP/1.0\r\n\r\n", 0.0).is_err());
        assert_eq!(m.records().count(), 0);
        assert!(m.queue().is_empty());
    }

    #[test]
    fn uninterrupted_run_completes_byte_identical() {
        let data = content(6 * 1024 * 1024);
        let proxy = Mutex::new(manager(4, None));
        let id = proxy.lock().unwrap().accept_request(OriginRequest::get(URL), 0.0).unwrap();
        let mut t = ScriptedTransport {
            data: data.clone(),
            fail_at: vec![],
            opened: vec![],
        };
        let mut leg = BufferedLeg::default();
        let wlan = InterfaceDescriptor::wlan("wlan");
        let out = run_session(&proxy, id, &wlan, &mut t, &mut leg, |_| None, &clock).unwrap();
        assert_eq!(out, Outcome::Completed);
        let mut m = proxy.into_inner().unwrap();
        assert_eq!(m.handle_outcome(id, &out, 1.0).unwrap(), SchedulingAction::Release);
        let rec = m.record(id).unwrap();
        assert_eq!(rec.bytes_delivered, data.len() as u64);
        assert_eq!(rec.content().unwrap(), &data[..]);
        assert_eq!(leg.body, data);
        assert_eq!(leg.head.unwrap().content_length(), Some(data.len() as u64));
        assert!(m.user_perceived_continuity(id));
    }

    #[test]
    fn failure_preserves_offset_for_next_request() {
        let data = content(500_000);
        let proxy = Mutex::new(manager(4, None));
        let id = proxy.lock().unwrap().accept_request(OriginRequest::get(URL), 0.0).unwrap();
        let mut t = ScriptedTransport {
            data: data.clone(),
            fail_at: vec![203_223],
            opened: vec![],
        };
        let mut leg = BufferedLeg::default();
        let wlan = InterfaceDescriptor::wlan("wlan");
        let out = run_session(&proxy, id, &wlan, &mut t, &mut leg, |_| None, &clock).unwrap();
        assert_eq!(out, Outcome::TransportFailure(FailureCause::ConnReset));
        {
            let mut m = proxy.lock().unwrap();
            assert_eq!(
                m.handle_outcome(id, &out, 1.0).unwrap(),
                SchedulingAction::Requeue { await_event: true }
            );
            let rec = m.record(id).unwrap();
            assert_eq!(rec.bytes_delivered, 203_223);
            assert_eq!(rec.state, SessionState::Queued);
            assert!(rec.is_waiting_for_event());
            assert_eq!(m.next_runnable(), None);
            assert_eq!(m.release_waiting(), 1);
            assert_eq!(m.next_runnable(), Some(id));
            // Put it back; run_session begins the attempt itself.
            m.queue.push_back(id);
        }
        // The next request carries the preserved offset.
        let request = proxy.lock().unwrap().begin_attempt(id, &wlan, 2.0).unwrap();
        assert!(request.contains("Session-Offset: 203223\r\n"));
        proxy.lock().unwrap().records.get_mut(&id).unwrap().state = SessionState::Queued;
        proxy.lock().unwrap().active.remove(&id);

        let out = run_session(&proxy, id, &wlan, &mut t, &mut leg, |_| None, &clock).unwrap();
        assert_eq!(out, Outcome::Completed);
        assert_eq!(t.opened, vec![0, 203_223]);
        let mut m = proxy.into_inner().unwrap();
        m.handle_outcome(id, &out, 3.0).unwrap();
        assert_eq!(leg.body, data);
        assert!(m.user_perceived_continuity(id));
    }

    #[test]
    fn preemptive_candidate_requeues_at_tail() {
        let data = content(100_000);
        let proxy = Mutex::new(manager(4, None));
        let (id, other) = {
            let mut m = proxy.lock().unwrap();
            (
                m.accept_request(OriginRequest::get(URL), 0.0).unwrap(),
                m.accept_request(OriginRequest::get(URL), 0.0).unwrap(),
            )
        };
        let mut t = ScriptedTransport {
            data,
            fail_at: vec![],
            opened: vec![],
        };
        let mut leg = BufferedLeg::default();
        let cdma = InterfaceDescriptor::cdma("cdma");
        let out = run_session(
            &proxy,
            id,
            &cdma,
            &mut t,
            &mut leg,
            |rec| (rec.bytes_delivered > 20_000).then(|| InterfaceId::from("wlan")),
            &clock,
        )
        .unwrap();
        assert_eq!(
            out,
            Outcome::Preemptive {
                candidate: "wlan".into()
            }
        );
        let mut m = proxy.into_inner().unwrap();
        assert_eq!(
            m.handle_outcome(id, &out, 1.0).unwrap(),
            SchedulingAction::Requeue { await_event: false }
        );
        assert_eq!(m.queue().iter().collect::<Vec<_>>(), vec![other, id]);
        assert_eq!(m.record(id).unwrap().preemptions, 1);
        assert!(m.record(id).unwrap().bytes_delivered > 20_000);
    }

    #[test]
    fn zero_budget_fails_immediately() {
        let mut m = manager(4, Some(0));
        let id = m.accept_request(OriginRequest::get(URL), 0.0).unwrap();
        m.begin_attempt(id, &InterfaceDescriptor::wlan("w"), 0.0).unwrap();
        let action = m
            .handle_outcome(id, &Outcome::TransportFailure(FailureCause::NetDown), 1.0)
            .unwrap();
        assert_eq!(action, SchedulingAction::Fail);
        let rec = m.record(id).unwrap();
        assert_eq!(rec.state, SessionState::Failed);
        assert!(!m.user_perceived_continuity(id));
        assert!(m.queue().is_empty());
    }

    #[test]
    fn budget_counts_failures() {
        let mut m = manager(4, Some(2));
        let id = m.accept_request(OriginRequest::get(URL), 0.0).unwrap();
        let w = InterfaceDescriptor::wlan("w");
        let fail = Outcome::TransportFailure(FailureCause::HostDown);
        for expected in [
            SchedulingAction::Requeue { await_event: true },
            SchedulingAction::Requeue { await_event: true },
            SchedulingAction::Fail,
        ] {
            m.release_waiting();
            let next = m.next_runnable().unwrap();
            m.begin_attempt(next, &w, 0.0).unwrap();
            assert_eq!(m.handle_outcome(id, &fail, 0.0).unwrap(), expected);
        }
    }

    #[test]
    fn unrecognized_outcome_changes_nothing() {
        let mut m = manager(4, None);
        let id = m.accept_request(OriginRequest::get(URL), 0.0).unwrap();
        m.begin_attempt(id, &InterfaceDescriptor::wlan("w"), 0.0).unwrap();
        let out = Outcome::from_code(CauseCode(9999), None);
        assert_eq!(out, Outcome::Unrecognized(CauseCode(9999)));
        assert_eq!(m.handle_outcome(id, &out, 0.0).unwrap(), SchedulingAction::Continue);
        assert_eq!(m.record(id).unwrap().state, SessionState::Active);
    }

    #[test]
    fn premature_end_of_stream_is_a_failure() {
        let mut m = manager(4, None);
        let id = m.accept_request(OriginRequest::get(URL), 0.0).unwrap();
        m.begin_attempt(id, &InterfaceDescriptor::wlan("w"), 0.0).unwrap();
        let mut head = ResponseHead::new(200, "OK");
        head.set_header("Content-Length", "10");
        m.on_response_head(id, &head).unwrap();
        m.deliver(id, b"abc", 0.0).unwrap();
        assert_eq!(
            m.handle_outcome(id, &Outcome::Completed, 0.0).unwrap(),
            SchedulingAction::Requeue { await_event: true }
        );
    }

    #[test]
    fn session_level_recovery_restarts_and_dedupes() {
        let mut m = SessionManager::new(ProxyConfig {
            recovery: RecoveryMode::SessionLevel,
            ..ProxyConfig::default()
        });
        let id = m.accept_request(OriginRequest::get(URL), 0.0).unwrap();
        let w = InterfaceDescriptor::wlan("w");
        m.begin_attempt(id, &w, 0.0).unwrap();
        m.deliver(id, b"abcd", 0.0).unwrap();
        m.handle_outcome(id, &Outcome::TransportFailure(FailureCause::ConnReset), 0.0)
            .unwrap();
        m.release_waiting();
        let req = m.begin_attempt(id, &w, 0.0).unwrap();
        assert!(req.contains("Session-Offset: 0\r\n"));
        let d = m.deliver(id, b"abcdef", 0.0).unwrap();
        assert_eq!((d.skip, d.fresh, d.duplicate), (4, 2, 4));
        let rec = m.record(id).unwrap();
        assert_eq!(rec.bytes_delivered, 6);
        assert_eq!(rec.content().unwrap(), b"abcdef");
        assert_eq!(rec.duplicate_bytes(), 4);
    }

    #[test]
    fn state_history_follows_allowed_transitions() {
        let mut m = manager(4, None);
        let id = m.accept_request(OriginRequest::get(URL), 0.0).unwrap();
        let w = InterfaceDescriptor::wlan("w");
        m.begin_attempt(id, &w, 0.0).unwrap();
        m.handle_outcome(id, &Outcome::TransportFailure(FailureCause::NetReset), 0.0)
            .unwrap();
        m.release_waiting();
        m.begin_attempt(id, &w, 0.0).unwrap();
        m.handle_outcome(id, &Outcome::Completed, 0.0).unwrap();
        use SessionState::*;
        assert_eq!(
            m.record(id).unwrap().history,
            vec![Queued, Active, Interrupted, Queued, Active, Completed]
        );
    }

    #[test]
    fn worker_capacity_limits_dispatch() {
        let mut m = manager(1, None);
        let a = m.accept_request(OriginRequest::get(URL), 0.0).unwrap();
        let b = m.accept_request(OriginRequest::get(URL), 0.0).unwrap();
        assert_eq!(m.next_runnable(), Some(a));
        m.begin_attempt(a, &InterfaceDescriptor::wlan("w"), 0.0).unwrap();
        assert_eq!(m.next_runnable(), None);
        m.handle_outcome(a, &Outcome::Completed, 0.0).unwrap();
        assert_eq!(m.next_runnable(), Some(b));
    }

    #[test]
    fn candidates_use_the_handoff_rule() {
        let mut m = manager(4, None);
        let id = m.accept_request(OriginRequest::get(URL), 0.0).unwrap();
        let cdma = InterfaceDescriptor::cdma("cdma");
        let wlan = InterfaceDescriptor::wlan("wlan");
        m.begin_attempt(id, &cdma, 0.0).unwrap();
        let mut head = ResponseHead::new(200, "OK");
        head.set_header("Content-Length", (500 * 1024).to_string());
        m.on_response_head(id, &head).unwrap();
        let params = PolicyParams::default();
        let history = HandoffHistory::default();
        let none = m.preemption_candidates(&[cdma.clone()], &history, &params, |d| d.bandwidth_capacity);
        assert!(none.is_empty());
        let got = m.preemption_candidates(&[cdma, wlan], &history, &params, |d| d.bandwidth_capacity);
        assert_eq!(got.len(), 1);
        assert!(got[0].1.preempt);
        assert_eq!(got[0].1.est_handoff_time, 2.2);
    }
}
