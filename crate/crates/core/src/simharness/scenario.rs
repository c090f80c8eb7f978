//! Scenario files.
//!
//! ```toml
//! name = "ap_power_cycle"
//! seed = 0
//!
//! [environment]
//! connect_event_latency = 2.0
//!
//! [[interfaces]]
//! id = "wlan"
//! kind = "wlan"
//! bandwidth_capacity = 11e6
//! cost_metric = 2
//! latency = 0.005
//!
//! [[transfers]]
//! resource_id = "doc"
//! size_bytes = 6000000
//!
//! [[timeline]]
//! time_s = 2.0
//! action = "ap_power_off"
//! iface = "wlan"
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::PolicyParams;
use crate::sensing::{FailureCause, InterfaceDescriptor, InterfaceId, InterfaceKind};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub environment: Environment,
    #[serde(default)]
    pub policy: PolicyParams,
    pub interfaces: Vec<InterfaceSpec>,
    #[serde(default)]
    pub transfers: Vec<TransferSpec>,
    #[serde(default)]
    pub timeline: Vec<TimelineEntry>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

/// Platform and fabric constants, all in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Environment {
    /// Delay before the OS reports a newly usable interface.
    pub connect_event_latency: f64,
    /// Delay before the OS reports a vanished interface.
    pub disconnect_event_latency: f64,
    pub subnet_handoff_delay: f64,
    /// How long an abandoned stream keeps delivering after a preemptive switch.
    pub drain_window: f64,
    /// Deliver OS link events to the proxy; when off only polling notices changes.
    pub link_events: bool,
    /// Whether the origin honours range requests.
    pub origin_ranges: bool,
    pub max_time: f64,
}

impl Default for Environment {
    fn default() -> Self {
        Self {
            connect_event_latency: 2.0,
            disconnect_event_latency: 10.0,
            subnet_handoff_delay: 17.4,
            drain_window: 2.0,
            link_events: true,
            origin_ranges: true,
            max_time: 3600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceSpec {
    pub id: InterfaceId,
    pub kind: InterfaceKind,
    pub bandwidth_capacity: f64,
    pub cost_metric: u32,
    #[serde(default = "yes")]
    pub available: bool,
    #[serde(default)]
    pub latency: f64,
    /// Fraction of nominal capacity actually achieved on the link.
    #[serde(default = "one")]
    pub utilization: f64,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

impl InterfaceSpec {
    pub fn descriptor(&self) -> InterfaceDescriptor {
        InterfaceDescriptor {
            id: self.id.clone(),
            kind: self.kind,
            bandwidth_capacity: self.bandwidth_capacity,
            cost_metric: self.cost_metric,
            available: self.available,
            latency: self.latency,
        }
    }

    pub fn effective_bandwidth(&self) -> f64 {
        self.bandwidth_capacity * self.utilization
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    #[serde(default)]
    pub start_time_s: f64,
    pub resource_id: String,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub time_s: f64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Enable { iface: InterfaceId },
    Disable { iface: InterfaceId },
    ApPowerOff { iface: InterfaceId },
    ApPowerOn { iface: InterfaceId },
    NicOff { iface: InterfaceId },
    NicOn { iface: InterfaceId },
    SubnetHandoff { from: InterfaceId, to: InterfaceId },
}

impl Action {
    pub fn interfaces(&self) -> Vec<&InterfaceId> {
        match self {
            Self::Enable { iface }
            | Self::Disable { iface }
            | Self::ApPowerOff { iface }
            | Self::ApPowerOn { iface }
            | Self::NicOff { iface }
            | Self::NicOn { iface } => vec![iface],
            Self::SubnetHandoff { from, to } => vec![from, to],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Enable { .. } => "enable",
            Self::Disable { .. } => "disable",
            Self::ApPowerOff { .. } => "ap_power_off",
            Self::ApPowerOn { .. } => "ap_power_on",
            Self::NicOff { .. } => "nic_off",
            Self::NicOn { .. } => "nic_on",
            Self::SubnetHandoff { .. } => "subnet_handoff",
        }
    }
}

/// Severs the stream carrying `transfer` once it reaches `at_bytes` of the
/// resource, leaving the link itself up. Fires at most once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub transfer: String,
    pub at_bytes: u64,
    #[serde(default = "conn_reset")]
    pub cause: FailureCause,
}

fn conn_reset() -> FailureCause {
    FailureCause::ConnReset
}

const CANNED: &[(&str, &str)] = &[
    ("hysteresis", include_str!("../../scenarios/hysteresis.toml")),
    ("preempt_cdma_wlan", include_str!("../../scenarios/preempt_cdma_wlan.toml")),
    ("preempt_wlan_ethernet", include_str!("../../scenarios/preempt_wlan_ethernet.toml")),
    ("ap_power_cycle", include_str!("../../scenarios/ap_power_cycle.toml")),
    ("subnet_handoff", include_str!("../../scenarios/subnet_handoff.toml")),
];

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Self = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn canned_names() -> impl Iterator<Item = &'static str> {
        CANNED.iter().map(|(n, _)| *n)
    }

    pub fn canned(name: &str) -> Option<Self> {
        CANNED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text).expect("canned scenario is valid"))
    }

    /// A canned name, or else a path on disk.
    pub fn resolve(name_or_path: &str) -> Result<Self, ScenarioError> {
        match Self::canned(name_or_path) {
            Some(s) if !Path::new(name_or_path).exists() => Ok(s),
            _ => Self::load(name_or_path),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn interface(&self, id: &InterfaceId) -> Option<&InterfaceSpec> {
        self.interfaces.iter().find(|i| &i.id == id)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.name.trim().is_empty() {
            return bad("empty name".into());
        }
        let mut ids = BTreeSet::new();
        for spec in &self.interfaces {
            spec.descriptor()
                .validate()
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            if !(spec.utilization > 0.0 && spec.utilization <= 1.0) {
                return bad(format!("interface {}: utilization must be in (0, 1]", spec.id));
            }
            if !ids.insert(&spec.id) {
                return bad(format!("duplicate interface {}", spec.id));
            }
        }
        let mut resources = BTreeSet::new();
        for t in &self.transfers {
            if !(t.start_time_s >= 0.0 && t.start_time_s.is_finite()) {
                return bad(format!("transfer {}: bad start time", t.resource_id));
            }
            let token = |c: char| c.is_ascii_alphanumeric() || "._-".contains(c);
            if t.resource_id.is_empty() || !t.resource_id.chars().all(token) {
                return bad(format!("resource id `{}` must be a non-empty token of [A-Za-z0-9._-]", t.resource_id));
            }
            if !resources.insert(&t.resource_id) {
                return bad(format!("duplicate transfer {}", t.resource_id));
            }
        }
        let mut last = 0.0;
        for entry in &self.timeline {
            if !(entry.time_s >= 0.0 && entry.time_s.is_finite()) {
                return bad(format!("bad time {} for {}", entry.time_s, entry.action.name()));
            }
            if entry.time_s < last {
                return bad("timeline is not sorted by time".into());
            }
            last = entry.time_s;
            for id in entry.action.interfaces() {
                if !ids.contains(id) {
                    return bad(format!("{} references unknown interface {id}", entry.action.name()));
                }
            }
            if let Action::SubnetHandoff { from, to } = &entry.action {
                if from == to {
                    return bad("subnet_handoff needs two distinct interfaces".into());
                }
            }
        }
        for f in &self.faults {
            if !resources.contains(&f.transfer) {
                return bad(format!("fault references unknown transfer {}", f.transfer));
            }
        }
        let env = &self.environment;
        for (name, v) in [
            ("connect_event_latency", env.connect_event_latency),
            ("disconnect_event_latency", env.disconnect_event_latency),
            ("subnet_handoff_delay", env.subnet_handoff_delay),
            ("drain_window", env.drain_window),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if !(env.max_time > 0.0 && env.max_time.is_finite()) {
            return bad("max_time must be positive".into());
        }
        Ok(())
    }
}
