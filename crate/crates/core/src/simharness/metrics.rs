//! Per-transfer measurements and report writers.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMetrics {
    pub resource_id: String,
    pub overall_time_s: f64,
    /// Time with no usable path: from each failure until the link the
    /// transfer resumed on was back up.
    pub disconnect_time_s: f64,
    /// Part of the disconnect time spent moving to a different interface.
    pub handoff_delay_s: f64,
    /// From a usable path existing to the first byte arriving over it.
    pub detection_delay_s: f64,
    pub useless_traffic_bytes: u64,
    /// Bytes received per interface, useless ones included.
    pub per_interface_bytes: BTreeMap<String, u64>,
    pub completed: bool,
    pub origin_bytes_fetched: u64,
    pub interruptions: u32,
    pub bytes_delivered: u64,
    pub continuity: bool,
    pub sha256: String,
}

impl TransferMetrics {
    pub fn interface_bytes(&self, id: &str) -> u64 {
        self.per_interface_bytes.get(id).copied().unwrap_or(0)
    }

    /// Disconnect plus detection: how long the user saw no progress.
    pub fn stall_s(&self) -> f64 {
        self.disconnect_time_s + self.detection_delay_s
    }
}

pub const CSV_HEADER: [&str; 13] = [
    "resource_id",
    "overall_time_s",
    "disconnect_time_s",
    "handoff_delay_s",
    "detection_delay_s",
    "useless_traffic_bytes",
    "per_interface_bytes",
    "completed",
    "origin_bytes_fetched",
    "interruptions",
    "bytes_delivered",
    "continuity",
    "sha256",
];

fn secs(v: f64) -> String {
    format!("{v:.2}")
}

pub fn write_csv<W: Write>(rows: &[TransferMetrics], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let per_iface = r
            .per_interface_bytes
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            r.resource_id.clone(),
            secs(r.overall_time_s),
            secs(r.disconnect_time_s),
            secs(r.handoff_delay_s),
            secs(r.detection_delay_s),
            r.useless_traffic_bytes.to_string(),
            per_iface,
            r.completed.to_string(),
            r.origin_bytes_fetched.to_string(),
            r.interruptions.to_string(),
            r.bytes_delivered.to_string(),
            r.continuity.to_string(),
            r.sha256.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv(rows: &[TransferMetrics]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn to_json(rows: &[TransferMetrics]) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("metrics serialise");
    s.push('\n');
    s
}
