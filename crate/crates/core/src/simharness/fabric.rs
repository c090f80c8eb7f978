//! Virtual network fabric: physical link state, the OS view of interfaces,
//! and per-link token buckets.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;

use super::scenario::{Action, Environment, InterfaceSpec};
use super::{to_ticks, Tick};
use crate::sensing::{FailureCause, InterfaceDescriptor, InterfaceId};

/// Cost of one byte in bucket units. A tick adds `bps * 10` units.
pub const UNITS_PER_BYTE: u64 = 8_000;

/// Deferred fabric change produced by an action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FabricChange {
    LinkUp(InterfaceId),
    OsAdd(InterfaceId),
    OsRemove(InterfaceId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduled {
    pub at: Tick,
    pub change: FabricChange,
    /// Link generation when scheduled; stale changes are dropped.
    pub generation: u64,
}

/// Immediate effects of an injected action.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Injection {
    /// Interfaces that just went down, with the cause raised on their streams.
    pub severed: Vec<(InterfaceId, FailureCause)>,
    pub scheduled: Vec<Scheduled>,
    pub applied: bool,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub spec: InterfaceSpec,
    pub up: bool,
    /// Tick at which the link last came up.
    pub up_since: Option<Tick>,
    pub generation: u64,
    credit: u64,
    pending_up: bool,
    /// Bytes carried during ticks in which the link was busy.
    measured_bytes: u64,
    busy_ticks: u64,
}

impl Link {
    fn units_per_tick(&self) -> u64 {
        (self.spec.effective_bandwidth() * 10.0).round() as u64
    }

    /// Throughput observed so far in bits/s, or nominal capacity before any
    /// traffic has been carried.
    pub fn measured_bandwidth(&self) -> f64 {
        if self.busy_ticks == 0 {
            self.spec.bandwidth_capacity
        } else {
            self.measured_bytes as f64 * 8.0 / (self.busy_ticks as f64 * super::TICK_S)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fabric {
    links: BTreeMap<InterfaceId, Link>,
    os_view: BTreeSet<InterfaceId>,
    env: Environment,
    warnings: u64,
}

impl Fabric {
    pub fn new(interfaces: &[InterfaceSpec], env: &Environment) -> Self {
        let links = interfaces
            .iter()
            .map(|spec| {
                let link = Link {
                    spec: spec.clone(),
                    up: spec.available,
                    up_since: spec.available.then_some(0),
                    generation: 0,
                    credit: 0,
                    pending_up: false,
                    measured_bytes: 0,
                    busy_ticks: 0,
                };
                (spec.id.clone(), link)
            })
            .collect();
        let os_view = interfaces.iter().filter(|s| s.available).map(|s| s.id.clone()).collect();
        Self {
            links,
            os_view,
            env: env.clone(),
            warnings: 0,
        }
    }

    pub fn link(&self, id: &InterfaceId) -> Option<&Link> {
        self.links.get(id)
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values()
    }

    pub fn os_view(&self) -> &BTreeSet<InterfaceId> {
        &self.os_view
    }

    pub fn descriptor(&self, id: &InterfaceId) -> Option<InterfaceDescriptor> {
        self.links.get(id).map(|l| {
            let mut d = l.spec.descriptor();
            d.available = true;
            d
        })
    }

    pub fn warnings(&self) -> u64 {
        self.warnings
    }

    pub fn is_up(&self, id: &InterfaceId) -> bool {
        self.links.get(id).is_some_and(|l| l.up)
    }

    /// Applies a scripted action at `now`. Actions on an interface in the
    /// wrong state change nothing and bump the warning counter.
    pub fn inject(&mut self, action: &Action, now: Tick) -> Injection {
        let connect = to_ticks(self.env.connect_event_latency);
        let disconnect = to_ticks(self.env.disconnect_event_latency);
        let mut out = Injection::default();
        let ok = match action {
            Action::ApPowerOff { iface } => self.down(iface, FailureCause::ConnReset, now + disconnect, &mut out),
            Action::NicOff { iface } => self.down(iface, FailureCause::NetDown, now + disconnect, &mut out),
            Action::Disable { iface } => self.down(iface, FailureCause::NetUnreachable, now, &mut out),
            Action::ApPowerOn { iface } => self.up(iface, now, now + connect, &mut out),
            Action::Enable { iface } => self.up(iface, now, now + connect, &mut out),
            Action::NicOn { iface } => self.up(iface, now + connect, now + connect, &mut out),
            Action::SubnetHandoff { from, to } => {
                let ready = self.links.get(to).is_some_and(|l| !l.up && !l.pending_up);
                if ready && self.is_up(from) {
                    self.down(from, FailureCause::AddrNotAvailable, now + disconnect, &mut out);
                    let up_at = now + to_ticks(self.env.subnet_handoff_delay);
                    self.up(to, up_at, up_at + connect, &mut out)
                } else {
                    false
                }
            }
        };
        if !ok {
            self.warnings += 1;
            warn!("{} ignored at tick {now}: interface in wrong state", action.name());
        }
        out.applied = ok;
        out
    }

    fn down(&mut self, id: &InterfaceId, cause: FailureCause, os_at: Tick, out: &mut Injection) -> bool {
        let Some(link) = self.links.get_mut(id) else {
            return false;
        };
        if !link.up {
            return false;
        }
        link.up = false;
        link.up_since = None;
        link.credit = 0;
        link.generation += 1;
        out.severed.push((id.clone(), cause));
        out.scheduled.push(Scheduled {
            at: os_at,
            change: FabricChange::OsRemove(id.clone()),
            generation: link.generation,
        });
        true
    }

    fn up(&mut self, id: &InterfaceId, link_at: Tick, os_at: Tick, out: &mut Injection) -> bool {
        let Some(link) = self.links.get_mut(id) else {
            return false;
        };
        if link.up || link.pending_up {
            return false;
        }
        link.pending_up = true;
        link.generation += 1;
        out.scheduled.push(Scheduled {
            at: link_at,
            change: FabricChange::LinkUp(id.clone()),
            generation: link.generation,
        });
        out.scheduled.push(Scheduled {
            at: os_at,
            change: FabricChange::OsAdd(id.clone()),
            generation: link.generation,
        });
        true
    }

    /// Applies a deferred change. Returns whether the OS view changed.
    pub fn apply(&mut self, s: &Scheduled, now: Tick) -> bool {
        let Some(link) = self.links.get_mut(change_id(&s.change)) else {
            return false;
        };
        if link.generation != s.generation {
            return false;
        }
        match &s.change {
            FabricChange::LinkUp(_) => {
                link.up = true;
                link.pending_up = false;
                link.up_since = Some(now);
                link.credit = 0;
                false
            }
            FabricChange::OsAdd(id) => self.os_view.insert(id.clone()),
            FabricChange::OsRemove(id) => self.os_view.remove(id),
        }
    }

    /// Refills the bucket of an up link and returns the whole-byte budget
    /// available this tick. Idle links keep at most one tick of credit.
    pub fn refill(&mut self, id: &InterfaceId, busy: bool) -> u64 {
        let Some(link) = self.links.get_mut(id) else {
            return 0;
        };
        if !link.up {
            return 0;
        }
        let per_tick = link.units_per_tick();
        link.credit += per_tick;
        if !busy {
            link.credit = link.credit.min(per_tick);
            return 0;
        }
        link.credit / UNITS_PER_BYTE
    }

    /// Charges bytes actually sent during a busy tick.
    pub fn charge(&mut self, id: &InterfaceId, bytes: u64) {
        if let Some(link) = self.links.get_mut(id) {
            link.credit -= bytes * UNITS_PER_BYTE;
            link.measured_bytes += bytes;
            link.busy_ticks += 1;
        }
    }
}

fn change_id(c: &FabricChange) -> &InterfaceId {
    match c {
        FabricChange::LinkUp(id) | FabricChange::OsAdd(id) | FabricChange::OsRemove(id) => id,
    }
}
