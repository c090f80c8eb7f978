#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use resumable_proxy::sensing::{FailureCause, InterfaceKind};
use resumable_proxy::simharness::{
    origin_resource, Action, Environment, FaultSpec, InterfaceSpec, Scenario, TimelineEntry, TransferSpec,
};

pub fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the origin body a transfer should deliver.
pub fn origin_sha(seed: u64, t: &TransferSpec) -> String {
    sha_hex(&origin_resource(seed, t).to_vec())
}

pub fn wlan(id: &str, available: bool) -> InterfaceSpec {
    InterfaceSpec {
        id: id.into(),
        kind: InterfaceKind::Wlan,
        bandwidth_capacity: 11e6,
        cost_metric: 2,
        available,
        latency: 0.005,
        utilization: 1.0,
    }
}

pub fn cdma(id: &str, utilization: f64) -> InterfaceSpec {
    InterfaceSpec {
        id: id.into(),
        kind: InterfaceKind::Cellular,
        bandwidth_capacity: 144_000.0,
        cost_metric: 5,
        available: true,
        latency: 0.5,
        utilization,
    }
}

pub fn transfer(id: &str, size: u64, start: f64) -> TransferSpec {
    TransferSpec {
        start_time_s: start,
        resource_id: id.into(),
        size_bytes: size,
    }
}

pub fn scenario(name: &str, interfaces: Vec<InterfaceSpec>, transfers: Vec<TransferSpec>) -> Scenario {
    Scenario {
        name: name.into(),
        seed: 0,
        environment: Environment::default(),
        policy: Default::default(),
        interfaces,
        transfers,
        timeline: Vec::new(),
        faults: Vec::new(),
    }
}

pub fn at(time_s: f64, action: Action) -> TimelineEntry {
    TimelineEntry { time_s, action }
}

/// Random scenario with one to five failures of mixed kinds: progress
/// faults, access point power cycles, NIC cycles and subnet handoffs.
pub fn fuzz_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_transfers = rng.gen_range(1..=3);
    let transfers: Vec<TransferSpec> = (0..n_transfers)
        .map(|i| transfer(&format!("r{i}"), rng.gen_range(500_000..6_000_000), rng.gen_range(0..4) as f64 * 0.5))
        .collect();
    let mut sc = scenario(
        &format!("fuzz_{seed}"),
        vec![wlan("a", true), wlan("b", false)],
        transfers.clone(),
    );
    sc.seed = seed;
    let failures = rng.gen_range(1..=5);
    let mut t = 0.2;
    // Interface currently carrying traffic; the other one is down.
    let (mut live, mut spare) = ("a", "b");
    for _ in 0..failures {
        t += rng.gen_range(0.05..0.6);
        match rng.gen_range(0..4) {
            0 => {
                let target = &transfers[rng.gen_range(0..transfers.len())];
                sc.faults.push(FaultSpec {
                    transfer: target.resource_id.clone(),
                    at_bytes: rng.gen_range(1..target.size_bytes),
                    cause: FailureCause::ALL[rng.gen_range(0..FailureCause::ALL.len())],
                });
            }
            1 => {
                let off = rng.gen_range(0.5..20.0);
                sc.timeline.push(at(t, Action::ApPowerOff { iface: live.into() }));
                t += off;
                sc.timeline.push(at(t, Action::ApPowerOn { iface: live.into() }));
            }
            2 => {
                let off = rng.gen_range(0.5..20.0);
                sc.timeline.push(at(t, Action::NicOff { iface: live.into() }));
                t += off;
                sc.timeline.push(at(t, Action::NicOn { iface: live.into() }));
                t += 2.0;
            }
            _ => {
                sc.timeline.push(at(
                    t,
                    Action::SubnetHandoff {
                        from: live.into(),
                        to: spare.into(),
                    },
                ));
                t += 17.4;
                std::mem::swap(&mut live, &mut spare);
            }
        }
    }
    sc
}
