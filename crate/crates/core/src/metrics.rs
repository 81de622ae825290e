//! Request records, run-side event logs and the aggregated [`Report`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Outcome, UserId, VersionId};
use crate::kernel::SimTime;
use crate::strategies::BounceEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestKind {
    Enroll,
    Runtime,
    Handshake,
}

impl RequestKind {
    pub const ALL: [RequestKind; 3] = [RequestKind::Enroll, RequestKind::Runtime, RequestKind::Handshake];

    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::Enroll => "ENROLL",
            RequestKind::Runtime => "RUNTIME",
            RequestKind::Handshake => "HANDSHAKE",
        }
    }
}

/// One user-visible exchange, measured at the device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub kind: RequestKind,
    pub user_id: UserId,
    pub submitted: SimTime,
    pub completed: SimTime,
    pub outcome: Outcome,
    pub reenrollments_in_path: u32,
}

impl RequestRecord {
    pub fn latency_ms(&self) -> u64 {
        self.completed.since(self.submitted)
    }
}

/// A profile generation other than a user's initial enrollment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReenrollEvent {
    pub user_id: UserId,
    pub version: VersionId,
    pub at: SimTime,
    pub on_request_path: bool,
}

/// Newest stored profile version of a user after a write.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredVersion {
    pub user_id: UserId,
    pub at: SimTime,
    pub newest: VersionId,
}

/// Counters that are not derivable from request records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunTotals {
    pub total_reenrollments: u64,
    pub mismatch_violations: u64,
    pub stale_profile_events: u64,
    pub no_stored_audio_events: u64,
    pub maintenance_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyStats {
    pub max: Option<u64>,
    pub p50: Option<u64>,
    pub p95: Option<u64>,
}

/// Aggregate view of one run. JSON keys serialize alphabetically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    /// OK runtime requests over all runtime requests; absent without runtime traffic.
    pub availability: Option<f64>,
    pub bounce_count: u64,
    pub latency_ms: BTreeMap<RequestKind, LatencyStats>,
    pub maintenance_ms: u64,
    pub mismatch_violations: u64,
    pub no_stored_audio_events: u64,
    pub stale_profile_events: u64,
    pub total_reenrollments: u64,
    pub total_requests: BTreeMap<RequestKind, BTreeMap<Outcome, u64>>,
}

impl Report {
    pub fn requests(&self, kind: RequestKind, outcome: Outcome) -> u64 {
        self.total_requests
            .get(&kind)
            .and_then(|m| m.get(&outcome))
            .copied()
            .unwrap_or(0)
    }

    pub fn requests_of_kind(&self, kind: RequestKind) -> u64 {
        self.total_requests
            .get(&kind)
            .map(|m| m.values().sum())
            .unwrap_or(0)
    }

    pub fn latency(&self, kind: RequestKind) -> LatencyStats {
        self.latency_ms.get(&kind).copied().unwrap_or_default()
    }

    /// Pretty JSON with alphabetical keys.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report is always representable");
        let mut out = serde_json::to_string_pretty(&value).expect("value serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// 1-indexed nearest-rank percentile: the `ceil(pct/100 * n)`-th smallest.
pub fn nearest_rank(sorted: &[u64], pct: u64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len() as u64;
    let rank = (pct * n).div_ceil(100).max(1);
    Some(sorted[(rank - 1) as usize])
}

fn latency_stats(mut latencies: Vec<u64>) -> LatencyStats {
    latencies.sort_unstable();
    LatencyStats {
        max: latencies.last().copied(),
        p50: nearest_rank(&latencies, 50),
        p95: nearest_rank(&latencies, 95),
    }
}

/// Folds records and bounce events into a report. Independent of record order.
pub fn summarize(records: &[RequestRecord], bounces: &[BounceEvent], totals: &RunTotals) -> Report {
    let mut total_requests: BTreeMap<RequestKind, BTreeMap<Outcome, u64>> = RequestKind::ALL
        .iter()
        .map(|k| (*k, Outcome::ALL.iter().map(|o| (*o, 0)).collect()))
        .collect();
    let mut latencies: BTreeMap<RequestKind, Vec<u64>> =
        RequestKind::ALL.iter().map(|k| (*k, Vec::new())).collect();

    for r in records {
        *total_requests
            .get_mut(&r.kind)
            .and_then(|m| m.get_mut(&r.outcome))
            .expect("all buckets pre-populated") += 1;
        latencies.get_mut(&r.kind).expect("pre-populated").push(r.latency_ms());
    }

    let runtime = &total_requests[&RequestKind::Runtime];
    let runtime_total: u64 = runtime.values().sum();
    let availability = (runtime_total > 0).then(|| runtime[&Outcome::Ok] as f64 / runtime_total as f64);

    Report {
        availability,
        bounce_count: bounces.len() as u64,
        latency_ms: latencies.into_iter().map(|(k, v)| (k, latency_stats(v))).collect(),
        maintenance_ms: totals.maintenance_ms,
        mismatch_violations: totals.mismatch_violations,
        no_stored_audio_events: totals.no_stored_audio_events,
        stale_profile_events: totals.stale_profile_events,
        total_reenrollments: totals.total_reenrollments,
        total_requests,
    }
}

/// Everything a run measured, in event order.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub records: Vec<RequestRecord>,
    pub bounces: Vec<BounceEvent>,
    pub reenrollments: Vec<ReenrollEvent>,
    pub stored_versions: Vec<StoredVersion>,
    pub maintenance_windows: Vec<(SimTime, Option<SimTime>)>,
    /// Fully served versions, logged whenever the served set changes.
    pub fleet_versions: Vec<(SimTime, Vec<VersionId>)>,
    pub mismatch_violations: u64,
    pub stale_profile_events: u64,
    pub no_stored_audio_events: u64,
    pub initial_enrollments: u64,
}

impl RunLog {
    pub fn record(&mut self, record: RequestRecord) {
        debug_assert!(record.completed >= record.submitted);
        self.records.push(record);
    }

    pub fn reenrolled(&mut self, user_id: &str, version: &VersionId, at: SimTime, on_request_path: bool) {
        self.reenrollments.push(ReenrollEvent {
            user_id: user_id.to_owned(),
            version: version.clone(),
            at,
            on_request_path,
        });
    }

    /// Logs the user's newest stored version after a write and records a
    /// bounce when the written version is older than what was stored before.
    pub fn profile_written(
        &mut self,
        user_id: &str,
        previous_newest: Option<&VersionId>,
        written: &VersionId,
        newest_after: &VersionId,
        at: SimTime,
    ) {
        if let Some(prev) = previous_newest {
            if prev.is_newer_than(written) {
                self.bounces.push(BounceEvent {
                    user_id: user_id.to_owned(),
                    from_version: prev.clone(),
                    to_version: written.clone(),
                    at,
                });
            }
        }
        self.stored_versions.push(StoredVersion {
            user_id: user_id.to_owned(),
            at,
            newest: newest_after.clone(),
        });
    }

    pub fn maintenance_started(&mut self, at: SimTime) {
        self.maintenance_windows.push((at, None));
    }

    pub fn maintenance_ended(&mut self, at: SimTime) {
        if let Some(last) = self.maintenance_windows.last_mut() {
            if last.1.is_none() {
                last.1 = Some(at);
            }
        }
    }

    pub fn fleet_changed(&mut self, at: SimTime, mut versions: Vec<VersionId>) {
        versions.sort();
        versions.dedup();
        if self.fleet_versions.last().map(|(_, v)| v) != Some(&versions) {
            self.fleet_versions.push((at, versions));
        }
    }

    /// Closed maintenance time, with an open window counted up to `end`.
    pub fn maintenance_ms(&self, end: SimTime) -> u64 {
        self.maintenance_windows
            .iter()
            .map(|(start, stop)| stop.unwrap_or(end).since(*start))
            .sum()
    }

    pub fn totals(&self, end: SimTime) -> RunTotals {
        RunTotals {
            total_reenrollments: self.reenrollments.len() as u64,
            mismatch_violations: self.mismatch_violations,
            stale_profile_events: self.stale_profile_events,
            no_stored_audio_events: self.no_stored_audio_events,
            maintenance_ms: self.maintenance_ms(end),
        }
    }

    pub fn report(&self, end: SimTime) -> Report {
        summarize(&self.records, &self.bounces, &self.totals(end))
    }
}
