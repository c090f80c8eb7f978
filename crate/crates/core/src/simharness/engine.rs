use std::collections::BTreeMap;
use std::io::Read;

use log::debug;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::fabric::{Fabric, FabricChange, Scheduled};
use super::metrics::TransferMetrics;
use super::scenario::{Scenario, ScenarioError, TransferSpec};
use super::{origin_resource, origin_url, to_secs, to_ticks, StackConfig, Tick};
use crate::client_proxy::{Outcome, ProxyConfig, ProxyError, SchedulingAction, SessionId, SessionManager, SessionState};
use crate::gateway::{Gateway, GatewayError, MemoryOrigin, RelayBody, Resource};
use crate::policy::{select_interface, HandoffHistory};
use crate::protocol::{OriginRequest, ProtocolError};
use crate::sensing::{EventKind, FailureCause, InterfaceDescriptor, InterfaceId, NetworkEvent, Poller};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invalid stack config: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Result of one scenario run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub scenario: String,
    pub seed: u64,
    pub config: StackConfig,
    pub transfers: Vec<TransferMetrics>,
    /// Scripted actions ignored because the interface was in the wrong state.
    pub warnings: u64,
    pub end_time_s: f64,
}

impl SimRun {
    pub fn transfer(&self, resource_id: &str) -> Option<&TransferMetrics> {
        self.transfers.iter().find(|t| t.resource_id == resource_id)
    }

    pub fn all_completed(&self) -> bool {
        self.transfers.iter().all(|t| t.completed)
    }
}

/// Runs `scenario` to completion (or its time limit) under `config`.
/// `seed` selects the origin content; identical inputs give identical runs.
pub fn run_scenario(scenario: &Scenario, config: &StackConfig, seed: u64) -> Result<SimRun, SimError> {
    scenario.validate()?;
    if !(config.poll_interval > 0.0 && config.poll_interval.is_finite()) {
        return Err(SimError::Config("poll_interval must be positive".into()));
    }
    if config.workers == 0 {
        return Err(SimError::Config("workers must be at least 1".into()));
    }
    Engine::new(scenario, config, seed).run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Class {
    Poll,
    Action,
    Internal,
}

#[derive(Debug)]
enum Event {
    Poll,
    Action(usize),
    Start(usize),
    Fabric(Scheduled),
}

#[derive(Default)]
struct Agenda {
    events: BTreeMap<(Tick, Class, u64), Event>,
    seq: u64,
}

impl Agenda {
    fn push(&mut self, at: Tick, class: Class, event: Event) {
        self.seq += 1;
        self.events.insert((at, class, self.seq), event);
    }

    fn pop_due(&mut self, now: Tick) -> Option<Event> {
        let (&key, _) = self.events.first_key_value()?;
        if key.0 > now {
            return None;
        }
        self.events.remove(&key)
    }

    fn has_starts(&self) -> bool {
        self.events.values().any(|e| matches!(e, Event::Start(_)))
    }
}

enum Phase {
    Connecting { ready_at: Tick, request: String },
    Flowing,
    Draining { until: Tick },
}

struct Stream {
    transfer: usize,
    session: SessionId,
    iface: InterfaceId,
    phase: Phase,
    relay: Option<RelayBody>,
    done: bool,
}

struct Stall {
    start: Tick,
    from: InterfaceId,
    /// For preemptive switches: when the candidate link came up.
    candidate_since: Option<Tick>,
}

struct Fault {
    at: u64,
    cause: FailureCause,
    fired: bool,
}

struct TransferState {
    spec: TransferSpec,
    session: Option<SessionId>,
    hasher: Sha256,
    stall: Option<Stall>,
    disconnect: Tick,
    handoff: Tick,
    detection: Tick,
    useless: u64,
    per_iface: BTreeMap<String, u64>,
    origin_bytes: u64,
    interruptions: u32,
    ended_at: Option<Tick>,
    faults: Vec<Fault>,
}

struct Engine<'a> {
    sc: &'a Scenario,
    cfg: &'a StackConfig,
    seed: u64,
    fabric: Fabric,
    proxy: SessionManager,
    gateway: Gateway<MemoryOrigin>,
    view: BTreeMap<InterfaceId, InterfaceDescriptor>,
    poller: Poller,
    history: HandoffHistory,
    agenda: Agenda,
    streams: Vec<Stream>,
    transfers: Vec<TransferState>,
    by_session: BTreeMap<SessionId, usize>,
    now: Tick,
    buf: Vec<u8>,
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario, cfg: &'a StackConfig, seed: u64) -> Self {
        let fabric = Fabric::new(&sc.interfaces, &sc.environment);
        let mut origin = MemoryOrigin::new(sc.environment.origin_ranges);
        for t in &sc.transfers {
            origin.insert(origin_url(&t.resource_id), Resource::Synthetic(origin_resource(seed, t)));
        }
        let proxy = SessionManager::new(ProxyConfig {
            workers: cfg.workers,
            retry_budget: cfg.retry_budget,
            recovery: cfg.recovery,
            retain_payload: false,
            ..ProxyConfig::default()
        });
        let view = fabric
            .os_view()
            .iter()
            .filter_map(|id| fabric.descriptor(id).map(|d| (id.clone(), d)))
            .collect();
        let poller = Poller::new(fabric.os_view().clone());
        let transfers = sc
            .transfers
            .iter()
            .map(|spec| {
                let mut faults: Vec<Fault> = sc
                    .faults
                    .iter()
                    .filter(|f| f.transfer == spec.resource_id)
                    .map(|f| Fault {
                        at: f.at_bytes,
                        cause: f.cause,
                        fired: false,
                    })
                    .collect();
                faults.sort_by_key(|f| f.at);
                TransferState {
                    spec: spec.clone(),
                    session: None,
                    hasher: Sha256::new(),
                    stall: None,
                    disconnect: 0,
                    handoff: 0,
                    detection: 0,
                    useless: 0,
                    per_iface: BTreeMap::new(),
                    origin_bytes: 0,
                    interruptions: 0,
                    ended_at: None,
                    faults,
                }
            })
            .collect();
        Self {
            sc,
            cfg,
            seed,
            fabric,
            proxy,
            gateway: Gateway::new(origin),
            view,
            poller,
            history: HandoffHistory::default(),
            agenda: Agenda::default(),
            streams: Vec::new(),
            transfers,
            by_session: BTreeMap::new(),
            now: 0,
            buf: Vec::new(),
        }
    }

    fn run(mut self) -> Result<SimRun, SimError> {
        let poll_ticks = to_ticks(self.cfg.poll_interval).max(1);
        let max_ticks = to_ticks(self.sc.environment.max_time);
        self.agenda.push(poll_ticks, Class::Poll, Event::Poll);
        for (i, e) in self.sc.timeline.iter().enumerate() {
            self.agenda.push(to_ticks(e.time_s), Class::Action, Event::Action(i));
        }
        for (i, t) in self.sc.transfers.iter().enumerate() {
            self.agenda.push(to_ticks(t.start_time_s), Class::Internal, Event::Start(i));
        }

        loop {
            while let Some(event) = self.agenda.pop_due(self.now) {
                self.handle(event, poll_ticks)?;
            }
            self.dispatch()?;
            self.open_ready()?;
            self.move_bytes()?;
            self.sweep();
            if self.finished() {
                break;
            }
            self.now += 1;
            if self.now >= max_ticks {
                break;
            }
        }
        for i in 0..self.streams.len() {
            self.streams[i].done = true;
        }
        self.sweep();
        Ok(self.report())
    }

    fn secs(&self) -> f64 {
        to_secs(self.now)
    }

    fn finished(&self) -> bool {
        !self.agenda.has_starts()
            && self.streams.is_empty()
            && self.transfers.iter().all(|t| t.ended_at.is_some())
    }

    fn handle(&mut self, event: Event, poll_ticks: Tick) -> Result<(), SimError> {
        match event {
            Event::Poll => {
                let events = self.poller.poll(self.fabric.os_view(), self.secs());
                for e in events {
                    self.view_event(&e);
                }
                if !self.view.is_empty() {
                    self.proxy.release_waiting();
                }
                self.agenda.push(self.now + poll_ticks, Class::Poll, Event::Poll);
            }
            Event::Action(i) => {
                let action = &self.sc.timeline[i].action;
                debug!("t={} {:?}", self.secs(), action);
                let inj = self.fabric.inject(action, self.now);
                for (iface, cause) in inj.severed {
                    self.sever(&iface, cause)?;
                }
                for s in inj.scheduled {
                    self.agenda.push(s.at, Class::Internal, Event::Fabric(s));
                }
            }
            Event::Start(i) => {
                let url = origin_url(&self.transfers[i].spec.resource_id);
                let id = self.proxy.accept_request(OriginRequest::get(url), self.secs())?;
                self.transfers[i].session = Some(id);
                self.by_session.insert(id, i);
            }
            Event::Fabric(s) => {
                let changed = self.fabric.apply(&s, self.now);
                if changed && self.sc.environment.link_events {
                    let e = match &s.change {
                        FabricChange::OsAdd(id) => NetworkEvent::connected(id, self.secs()),
                        FabricChange::OsRemove(id) => NetworkEvent::disconnected(id, self.secs()),
                        FabricChange::LinkUp(_) => return Ok(()),
                    };
                    self.view_event(&e);
                }
            }
        }
        Ok(())
    }

    fn view_event(&mut self, e: &NetworkEvent) {
        debug!("t={} {:?} {}", self.secs(), e.kind, e.interface_id);
        match e.kind {
            EventKind::Connected => {
                let Some(desc) = self.fabric.descriptor(&e.interface_id) else {
                    return;
                };
                if self.view.insert(e.interface_id.clone(), desc).is_none() {
                    self.proxy.release_waiting();
                    if self.cfg.preemption {
                        self.evaluate_preemption();
                    }
                }
            }
            EventKind::Disconnected => {
                if self.view.remove(&e.interface_id).is_some() && !self.view.is_empty() {
                    self.proxy.release_waiting();
                }
            }
            EventKind::TransportFailure | EventKind::PreemptiveCandidate => {}
        }
    }

    fn evaluate_preemption(&mut self) {
        let view: Vec<InterfaceDescriptor> = self.view.values().cloned().collect();
        let fabric = &self.fabric;
        let decisions = self
            .proxy
            .preemption_candidates(&view, &self.history, &self.sc.policy, |d| {
                fabric.link(&d.id).map_or(d.bandwidth_capacity, |l| l.measured_bandwidth())
            });
        for (session, decision) in decisions {
            debug!("t={} {session} {:?}", self.secs(), decision);
            if let Some(candidate) = decision.to_interface {
                self.preempt(session, candidate);
            }
        }
    }

    fn live_stream(&self, session: SessionId) -> Option<usize> {
        self.streams
            .iter()
            .position(|s| s.session == session && !s.done && !matches!(s.phase, Phase::Draining { .. }))
    }

    fn preempt(&mut self, session: SessionId, candidate: InterfaceId) {
        let Some(idx) = self.live_stream(session) else {
            return;
        };
        let outcome = Outcome::Preemptive {
            candidate: candidate.clone(),
        };
        if self.proxy.handle_outcome(session, &outcome, self.secs()).is_err() {
            return;
        }
        let drain = to_ticks(self.sc.environment.drain_window);
        let stream = &mut self.streams[idx];
        if matches!(stream.phase, Phase::Flowing) && drain > 0 {
            stream.phase = Phase::Draining { until: self.now + drain };
        } else {
            stream.done = true;
        }
        let from = stream.iface.clone();
        let t = &mut self.transfers[stream.transfer];
        if t.stall.is_none() {
            t.interruptions += 1;
            t.stall = Some(Stall {
                start: self.now,
                from,
                candidate_since: self.fabric.link(&candidate).and_then(|l| l.up_since),
            });
        }
    }

    fn sever(&mut self, iface: &InterfaceId, cause: FailureCause) -> Result<(), SimError> {
        for idx in 0..self.streams.len() {
            let s = &self.streams[idx];
            if s.done || &s.iface != iface {
                continue;
            }
            if matches!(s.phase, Phase::Draining { .. }) {
                self.streams[idx].done = true;
            } else {
                self.fail_stream(idx, cause)?;
            }
        }
        Ok(())
    }

    fn fail_stream(&mut self, idx: usize, cause: FailureCause) -> Result<(), SimError> {
        let stream = &mut self.streams[idx];
        stream.done = true;
        let (session, ti, iface) = (stream.session, stream.transfer, stream.iface.clone());
        debug!("t={} {session} failed on {iface}: {}", to_secs(self.now), cause.as_str());
        let action = self
            .proxy
            .handle_outcome(session, &Outcome::TransportFailure(cause), to_secs(self.now))?;
        let t = &mut self.transfers[ti];
        if t.stall.is_none() {
            t.interruptions += 1;
            t.stall = Some(Stall {
                start: self.now,
                from: iface,
                candidate_since: None,
            });
        }
        if action == SchedulingAction::Fail {
            t.ended_at = Some(self.now);
        }
        Ok(())
    }

    fn dispatch(&mut self) -> Result<(), SimError> {
        while !self.view.is_empty() {
            let Some(session) = self.proxy.next_runnable() else {
                break;
            };
            let view: Vec<InterfaceDescriptor> = self.view.values().cloned().collect();
            let best = select_interface(&view).expect("view is not empty").clone();
            let request = self.proxy.begin_attempt(session, &best, self.secs())?;
            let rtt = to_ticks(best.latency).max(1);
            self.streams.push(Stream {
                transfer: self.by_session[&session],
                session,
                iface: best.id.clone(),
                phase: Phase::Connecting {
                    ready_at: self.now + rtt,
                    request,
                },
                relay: None,
                done: false,
            });
        }
        Ok(())
    }

    fn open_ready(&mut self) -> Result<(), SimError> {
        for idx in 0..self.streams.len() {
            let s = &self.streams[idx];
            let Phase::Connecting { ready_at, request } = &s.phase else {
                continue;
            };
            if s.done || *ready_at > self.now {
                continue;
            }
            if !self.fabric.is_up(&s.iface) {
                self.fail_stream(idx, FailureCause::HostDown)?;
                continue;
            }
            let relay = self.gateway.dispatch(request)?;
            self.proxy.on_response_head(s.session, &relay.head)?;
            let s = &mut self.streams[idx];
            s.relay = Some(relay.body);
            s.phase = Phase::Flowing;
        }
        Ok(())
    }

    fn move_bytes(&mut self) -> Result<(), SimError> {
        let ids: Vec<InterfaceId> = self.fabric.links().map(|l| l.spec.id.clone()).collect();
        for id in ids {
            let carriers: Vec<usize> = (0..self.streams.len())
                .filter(|&i| {
                    let s = &self.streams[i];
                    !s.done && s.iface == id && !matches!(s.phase, Phase::Connecting { .. })
                })
                .collect();
            let budget = self.fabric.refill(&id, !carriers.is_empty());
            if carriers.is_empty() {
                continue;
            }
            let share = budget / carriers.len() as u64;
            let mut used = 0;
            for idx in carriers {
                used += self.step(idx, share)?;
            }
            self.fabric.charge(&id, used);
        }
        Ok(())
    }

    fn read_relay(&mut self, idx: usize, want: u64) -> usize {
        self.buf.resize(want as usize, 0);
        let relay = self.streams[idx].relay.as_mut().expect("flowing stream has a relay");
        let mut filled = 0;
        while filled < self.buf.len() {
            match relay.read(&mut self.buf[filled..]) {
                Ok(0) | Err(_) => break,
                Ok(n) => filled += n,
            }
        }
        filled
    }

    /// Moves up to `share` bytes on one stream; returns bytes carried.
    fn step(&mut self, idx: usize, share: u64) -> Result<u64, SimError> {
        let (ti, session, iface) = {
            let s = &self.streams[idx];
            (s.transfer, s.session, s.iface.clone())
        };
        if let Phase::Draining { until } = self.streams[idx].phase {
            if self.now >= until {
                self.streams[idx].done = true;
                return Ok(0);
            }
            let n = self.read_relay(idx, share);
            let t = &mut self.transfers[ti];
            t.useless += n as u64;
            *t.per_iface.entry(iface.to_string()).or_default() += n as u64;
            if (n as u64) < share {
                self.streams[idx].done = true;
            }
            return Ok(n as u64);
        }

        let pos = self.proxy.record(session).expect("stream has a session").attempt_position();
        let mut want = share;
        let mut fault = None;
        if let Some(fi) = self.transfers[ti].faults.iter().position(|f| !f.fired) {
            let f = &self.transfers[ti].faults[fi];
            if f.at <= pos {
                let cause = f.cause;
                self.transfers[ti].faults[fi].fired = true;
                self.fail_stream(idx, cause)?;
                return Ok(0);
            }
            if f.at - pos <= want {
                want = f.at - pos;
                fault = Some(fi);
            }
        }

        let n = self.read_relay(idx, want);
        let arrival = self.now + 1;
        if n > 0 {
            let d = self.proxy.deliver(session, &self.buf[..n], to_secs(arrival))?;
            let t = &mut self.transfers[ti];
            t.hasher.update(&self.buf[d.skip..d.skip + d.fresh]);
            *t.per_iface.entry(iface.to_string()).or_default() += n as u64;
            t.useless += d.duplicate as u64;
            if d.fresh > 0 {
                self.close_stall(ti, &iface, arrival);
            }
        }

        if let Some(fi) = fault.filter(|_| n as u64 == want) {
            let cause = self.transfers[ti].faults[fi].cause;
            self.transfers[ti].faults[fi].fired = true;
            self.fail_stream(idx, cause)?;
        } else if (n as u64) < want || self.proxy.record(session).and_then(|r| r.remaining()) == Some(0) {
            self.streams[idx].done = true;
            self.proxy.handle_outcome(session, &Outcome::Completed, to_secs(arrival))?;
            match self.proxy.record(session).map(|r| r.state) {
                Some(SessionState::Completed) => self.transfers[ti].ended_at = Some(arrival),
                Some(SessionState::Failed) => self.transfers[ti].ended_at = Some(self.now),
                _ => {
                    let t = &mut self.transfers[ti];
                    if t.stall.is_none() {
                        t.interruptions += 1;
                        t.stall = Some(Stall {
                            start: self.now,
                            from: iface,
                            candidate_since: None,
                        });
                    }
                }
            }
        }
        Ok(n as u64)
    }

    fn close_stall(&mut self, ti: usize, iface: &InterfaceId, arrival: Tick) {
        let Some(stall) = self.transfers[ti].stall.take() else {
            return;
        };
        let up_since = self.fabric.link(iface).and_then(|l| l.up_since).unwrap_or(stall.start);
        let t = &mut self.transfers[ti];
        match stall.candidate_since {
            Some(since) => {
                let since = since.min(arrival);
                t.detection += arrival - since;
                if let (Some(from), Some(to)) = (self.fabric.link(&stall.from), self.fabric.link(iface)) {
                    self.history.record(from.spec.kind, to.spec.kind, to_secs(arrival - since));
                }
            }
            None => {
                let restore = stall.start.max(up_since).min(arrival);
                t.disconnect += restore - stall.start;
                if &stall.from != iface {
                    t.handoff += restore - stall.start;
                }
                t.detection += arrival - restore;
            }
        }
    }

    fn sweep(&mut self) {
        let transfers = &mut self.transfers;
        self.streams.retain(|s| {
            if s.done {
                if let Some(relay) = &s.relay {
                    transfers[s.transfer].origin_bytes += relay.origin_bytes();
                }
            }
            !s.done
        });
    }

    fn report(self) -> SimRun {
        let rows = self
            .transfers
            .iter()
            .map(|t| {
                let start = to_ticks(t.spec.start_time_s);
                let end = t.ended_at.unwrap_or(self.now).max(start);
                let rec = t.session.and_then(|id| self.proxy.record(id));
                let completed = rec.is_some_and(|r| r.state == SessionState::Completed);
                TransferMetrics {
                    resource_id: t.spec.resource_id.clone(),
                    overall_time_s: to_secs(end - start),
                    disconnect_time_s: to_secs(t.disconnect),
                    handoff_delay_s: to_secs(t.handoff),
                    detection_delay_s: to_secs(t.detection),
                    useless_traffic_bytes: t.useless,
                    per_interface_bytes: t.per_iface.clone(),
                    completed,
                    origin_bytes_fetched: t.origin_bytes,
                    interruptions: t.interruptions,
                    bytes_delivered: rec.map_or(0, |r| r.bytes_delivered),
                    continuity: t.session.is_some_and(|id| self.proxy.user_perceived_continuity(id)),
                    sha256: hex(&t.hasher.clone().finalize()),
                }
            })
            .collect();
        SimRun {
            scenario: self.sc.name.clone(),
            seed: self.seed,
            config: self.cfg.clone(),
            transfers: rows,
            warnings: self.fabric.warnings(),
            end_time_s: self.secs(),
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
