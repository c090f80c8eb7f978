//! Deterministic virtual-time harness: the full proxy and gateway stack over
//! a scripted network fabric.
//!
//! Time advances in 10 ms ticks. Within a tick, due events run first (poll,
//! then scripted actions, then internal changes, each group in scheduling
//! order), then waiting sessions are dispatched, then links move bytes.

mod engine;
pub mod fabric;
pub mod metrics;
pub mod scenario;

use serde::{Deserialize, Serialize};

use crate::client_proxy::RecoveryMode;
use crate::gateway::SyntheticResource;

pub use engine::{run_scenario, SimError, SimRun};
pub use fabric::{Fabric, FabricChange, Injection};
pub use metrics::{to_csv, to_json, write_csv, TransferMetrics};
pub use scenario::{Action, Environment, FaultSpec, InterfaceSpec, Scenario, ScenarioError, TimelineEntry, TransferSpec};

pub type Tick = u64;
pub const TICK_S: f64 = 0.01;

pub fn to_ticks(seconds: f64) -> Tick {
    (seconds / TICK_S).round() as Tick
}

pub fn to_secs(ticks: Tick) -> f64 {
    ticks as f64 / 100.0
}

/// Proxy-stack knobs that are not part of the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub preemption: bool,
    /// Seconds between interface polls.
    pub poll_interval: f64,
    pub workers: usize,
    pub recovery: RecoveryMode,
    pub retry_budget: Option<u32>,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            preemption: true,
            poll_interval: 10.0,
            workers: 4,
            recovery: RecoveryMode::PacketLevel,
            retry_budget: None,
        }
    }
}

impl StackConfig {
    pub fn with_preemption(preemption: bool) -> Self {
        Self {
            preemption,
            ..Self::default()
        }
    }
}

/// Origin content served for a transfer under `seed`.
pub fn origin_resource(seed: u64, transfer: &TransferSpec) -> SyntheticResource {
    SyntheticResource::new(seed, &transfer.resource_id, transfer.size_bytes)
}

pub fn origin_url(resource_id: &str) -> String {
    format!("http://origin.sim/{resource_id}")
}

/// Bytes that arrived over abandoned interfaces after preemptive switches,
/// plus duplicates discarded on resume.
pub fn measure_useless_traffic(run: &SimRun) -> u64 {
    run.transfers.iter().map(|t| t.useless_traffic_bytes).sum()
}
