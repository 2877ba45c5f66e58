//! Run report: the machine-readable outcome of one simulation. Serialized
//! as canonical JSON (UTF-8, sorted keys, plain integers) so two runs of
//! the same scenario and seed can be compared byte for byte.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::sim::VirtualMs;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub scenario_hash: String,
    pub seed: u64,
    pub rng_algorithm: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEventRecord {
    pub fired_at_ms: VirtualMs,
    pub target: String,
    pub kind: String,
    /// When the effect ended; open-ended effects (a wedge) have none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution_ms: Option<VirtualMs>,
    /// Fault hit an already-affected service and changed nothing.
    #[serde(default)]
    pub noop: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub rb: String,
    pub corrupted_at_ms: VirtualMs,
    pub detected_at_ms: VirtualMs,
    pub recovered_at_ms: VirtualMs,
    pub jobs_aborted: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GisMetrics {
    pub queries: u64,
    pub timeouts: u64,
    pub total_latency_ms: u64,
    pub max_latency_ms: u64,
    pub stale_serves: u64,
    pub rejected_publishes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricMetrics {
    pub installs_attempted: u64,
    pub installs_ok: u64,
    pub objects_failed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseTagOutcome {
    pub tag_id: u64,
    pub label: String,
    pub final_state: String,
    pub gate_log: Vec<ReleaseGateOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_to_application_ms: Option<VirtualMs>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseGateOutcome {
    pub at_ms: VirtualMs,
    pub gate: String,
    pub passed: bool,
    pub failed_packages: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseMetrics {
    pub tags: Vec<ReleaseTagOutcome>,
    pub bypass_installs: u64,
    pub bypass_refusals: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub jobs_submitted: u64,
    pub jobs_done: u64,
    pub jobs_aborted: BTreeMap<String, u64>,
    pub jobs_aborted_total: u64,
    pub jobs_active_at_end: u64,
    pub refused_at_capacity: u64,
    pub refused_rb_down: u64,
    /// Arrivals turned away before broker admission, by reason.
    pub rejected_jobs: BTreeMap<String, u64>,
    pub gram_wedged_failures: u64,
    pub gatekeeper_down_failures: u64,
    pub jobs_lost_to_cleanup: u64,
    pub jobs_lost_to_rb_recovery: u64,
    pub replication_successes: u64,
    pub replication_failures: BTreeMap<String, u64>,
    pub replication_failures_total: u64,
    pub misleading_free_space: u64,
    pub rc_collection_full: u64,
    pub fault_events: Vec<FaultEventRecord>,
    pub service_downtime_ms: BTreeMap<String, u64>,
    pub time_to_first_inode_exhaustion_ms: BTreeMap<String, VirtualMs>,
    pub rb_peak_active: BTreeMap<String, u64>,
    pub rb_recoveries: Vec<RecoveryRecord>,
    pub gis: GisMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fabric: Option<FabricMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release: Option<ReleaseMetrics>,
    pub events_dispatched: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub header: ReportHeader,
    pub metrics: Metrics,
}

impl Report {
    /// Canonical serialization: keys sorted, two-space indentation, a
    /// trailing newline, integers only.
    pub fn canonical_json(&self) -> String {
        // round-tripping through Value sorts object keys
        let value = serde_json::to_value(self).expect("report serializes");
        let mut out = serde_json::to_string_pretty(&value).expect("value serializes");
        out.push('\n');
        out
    }

    /// Count consistency: every submitted job is done, aborted, or still
    /// active; refused and rejected arrivals were never submitted.
    pub fn arithmetic_consistent(&self) -> bool {
        let m = &self.metrics;
        let aborted_sum: u64 = m.jobs_aborted.values().sum();
        m.jobs_submitted == m.jobs_done + m.jobs_aborted_total + m.jobs_active_at_end
            && aborted_sum == m.jobs_aborted_total
            && m.replication_failures.values().sum::<u64>() == m.replication_failures_total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let mut metrics = Metrics {
            jobs_submitted: 10,
            jobs_done: 7,
            jobs_aborted_total: 2,
            jobs_active_at_end: 1,
            ..Metrics::default()
        };
        metrics.jobs_aborted.insert("rb-recovery".into(), 2);
        Report {
            header: ReportHeader {
                scenario_hash: "abc".into(),
                seed: 42,
                rng_algorithm: "splitmix64".into(),
                tool_version: "0.1.0".into(),
            },
            metrics,
        }
    }

    #[test]
    fn canonical_json_sorts_keys_and_is_stable() {
        let a = sample().canonical_json();
        let b = sample().canonical_json();
        assert_eq!(a, b);
        let header_pos = a.find("\"header\"").unwrap();
        let metrics_pos = a.find("\"metrics\"").unwrap();
        assert!(header_pos < metrics_pos);
        let rng_pos = a.find("\"rng_algorithm\"").unwrap();
        let seed_pos = a.find("\"seed\"").unwrap();
        assert!(rng_pos < seed_pos, "keys must be sorted");
        assert!(a.ends_with('\n'));
    }

    #[test]
    fn arithmetic_consistency_detects_drift() {
        let mut report = sample();
        assert!(report.arithmetic_consistent());
        report.metrics.jobs_done = 8;
        assert!(!report.arithmetic_consistent());
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = sample();
        let json = report.canonical_json();
        let back: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
