//! Building a world from a scenario, running it, and comparing runs.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::domain::{AudioSample, VersionId};
use crate::engine::EngineInstance;
use crate::kernel::{Halted, Scheduler, SimRng, SimTime};
use crate::metrics::{Report, RequestKind, RunLog};
use crate::scenario::{RuntimeArrivals, Scenario, BASE_VERSION_ID};
use crate::strategies::{Deployment, DeviceAgent, FrontendController, Mitigation, Policy};
use crate::topology::{CloudServerNode, DeviceNode, ModelRelease, ModelStorageNode, NodeId, ServerId};
use crate::world::{Links, Msg, SimError, World};

/// Stream offsets for workload generation, far above any node index.
const ARRIVAL_STREAM: u64 = 1_000_000;
const AUDIO_STREAM: u64 = 2_000_000;
const HANDSHAKE_STREAM: u64 = 3_000_000;

/// Duration of every generated audio sample.
pub const SAMPLE_DURATION_MS: u32 = 3000;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("RUN_FAILED at t={at} seq={seq}: {error}")]
pub struct RunFailed {
    pub at: SimTime,
    pub seq: u64,
    pub error: SimError,
    /// Metrics accumulated up to the failing event.
    pub partial: Report,
}

pub struct RunOutput {
    pub report: Report,
    pub log: RunLog,
    pub trace: Option<Vec<String>>,
    pub world: World,
}

pub type Sim = Scheduler<NodeId, Msg>;

fn all_releases(s: &Scenario) -> Vec<ModelRelease> {
    let mut v = vec![ModelRelease {
        version: VersionId::new(BASE_VERSION_ID, 0),
        release_time: SimTime::ZERO,
        download_ms: 0,
        server_update_ms_range: (0, 0),
    }];
    v.extend(s.model_releases());
    v
}

/// Runtime arrival times per user index. Poisson gaps are inverse-CDF
/// exponential draws from the user's own stream, floored to whole ms.
pub fn arrival_schedule(s: &Scenario) -> Vec<(u64, usize)> {
    let mut out = Vec::new();
    match &s.runtime_arrivals {
        RuntimeArrivals::Explicit(list) => {
            for a in list {
                let idx: usize = a.user_id[1..].parse::<usize>().expect("validated user id") - 1;
                out.push((a.time_ms, idx));
            }
        }
        RuntimeArrivals::PoissonRatePerUserPerS(rate) => {
            if *rate > 0.0 {
                let per_ms = rate / 1000.0;
                for u in 0..s.users {
                    let mut rng = SimRng::for_node(s.seed, ARRIVAL_STREAM + u as u64);
                    let mut t = 0u64;
                    loop {
                        let gap = (-(1.0 - rng.next_f64()).ln() / per_ms).floor() as u64;
                        t = t.saturating_add(gap);
                        if t > s.duration_ms {
                            break;
                        }
                        out.push((t, u));
                    }
                }
            }
        }
    }
    out.sort();
    out
}

fn enrollment_audio(s: &Scenario, index: usize, user: &str) -> Vec<AudioSample> {
    let mut rng = SimRng::for_node(s.seed, AUDIO_STREAM + index as u64);
    (0..s.samples_per_user)
        .map(|_| AudioSample {
            speaker_id: user.to_owned(),
            seed: rng.next_u64(),
            duration_ms: SAMPLE_DURATION_MS,
        })
        .collect()
}

/// Constructs the world and schedules the whole workload. Exposed so tests
/// can adjust node state before running. `s` must already be validated.
pub fn build(s: &Scenario, trace: bool) -> (World, Sim) {
    let releases = all_releases(s);
    let initial: Vec<VersionId> = s.initial_versions();
    let initial_count = initial.len();
    let deployed: Vec<VersionId> = if s.strategy.policy == Policy::Double {
        initial[initial_count - 2..].to_vec()
    } else {
        vec![initial[initial_count - 1].clone()]
    };
    let newest = deployed.last().cloned().expect("an initial version");
    let strategy = s.strategy.clone();

    let engine = EngineInstance::new(newest.clone(), s.enroll_cost_ms_per_sample, s.runtime_cost_ms);
    let clouds: Vec<CloudServerNode> = if strategy.policy == Policy::Double {
        let half = s.cloud_servers / 2;
        (0..s.cloud_servers)
            .map(|i| {
                let v = if i < half { deployed[0].clone() } else { deployed[1].clone() };
                CloudServerNode::new(ServerId(i), engine.with_model(v))
            })
            .collect()
    } else {
        (0..s.cloud_servers)
            .map(|i| CloudServerNode::new(ServerId(i), engine.clone()))
            .collect()
    };

    let users = s.user_ids();
    let mut devices: Vec<DeviceAgent> = (0..s.devices)
        .map(|d| {
            let owners: Vec<String> = users
                .iter()
                .enumerate()
                .filter(|(i, _)| s.device_of(*i) == d)
                .map(|(_, u)| u.clone())
                .collect();
            let mut node = DeviceNode::new(d, owners);
            node.handshake_period_ms = strategy.handshake_period_ms;
            let local_engine = (strategy.deployment == Deployment::Device).then(|| {
                node.local_model = Some(newest.clone());
                engine.clone()
            });
            DeviceAgent::new(node, strategy.deployment, strategy.is_double(), local_engine, SAMPLE_DURATION_MS)
        })
        .collect();
    for (i, u) in users.iter().enumerate() {
        let audio = enrollment_audio(s, i, u);
        devices[s.device_of(i)].node.stored_audio.insert(u.clone(), audio);
    }

    let frontend = FrontendController::new(
        strategy.clone(),
        s.cloud_servers,
        &deployed,
        releases.clone(),
        s.reenroll_parallelism,
    );
    let storage = ModelStorageNode::new(releases.clone(), initial_count);
    let links = Links {
        device_frontend: s.latency.device_frontend,
        frontend_cloud: s.latency.frontend_cloud,
        frontend_db: s.latency.frontend_db,
        device_storage: s.latency.device_storage,
    };
    let mut world = World::new(s.seed, links, storage, frontend, clouds, devices);
    world.log.fleet_changed(SimTime::ZERO, world.frontend.available_versions());

    let mut sim = if trace { Scheduler::new().with_trace() } else { Scheduler::new() };
    for d in 0..s.devices {
        sim.schedule_in(0, NodeId::Device(d), Msg::StartEnrollment);
    }
    for (index, r) in releases.iter().enumerate().skip(initial_count) {
        let target = match strategy.deployment {
            Deployment::Device => NodeId::Storage,
            _ => NodeId::Frontend,
        };
        sim.schedule(r.release_time, target, Msg::Release { index })
            .expect("future release");
    }
    if strategy.mitigation == Mitigation::SyncTable {
        sim.schedule_in(strategy.sync_period_ms, NodeId::Frontend, Msg::SyncTick);
    }
    if let Some(period) = strategy.handshake_period_ms {
        for d in 0..s.devices {
            let mut rng = SimRng::for_node(s.seed, HANDSHAKE_STREAM + d as u64);
            sim.schedule_in(1 + rng.next_u64() % period, NodeId::Device(d), Msg::HandshakeTick);
        }
    }
    for (t, u) in arrival_schedule(s) {
        sim.schedule(SimTime(t), NodeId::Device(s.device_of(u)), Msg::Arrival { user: users[u].clone() })
            .expect("future arrival");
    }
    (world, sim)
}

/// Runs a built world to `s.duration_ms`.
pub fn run_built(s: &Scenario, mut world: World, mut sim: Sim) -> Result<RunOutput, Box<RunFailed>> {
    let end = SimTime(s.duration_ms);
    match sim.run_until(end, &mut world) {
        Ok(()) => {
            let report = world.log.report(end);
            Ok(RunOutput {
                report,
                log: world.log.clone(),
                trace: sim.take_trace(),
                world,
            })
        }
        Err(Halted { at, seq, error }) => Err(Box::new(RunFailed {
            at,
            seq,
            error,
            partial: world.log.report(at),
        })),
    }
}

pub fn run_detailed(s: &Scenario, trace: bool) -> Result<RunOutput, Box<RunFailed>> {
    let (world, sim) = build(s, trace);
    run_built(s, world, sim)
}

pub fn run(s: &Scenario) -> Result<Report, Box<RunFailed>> {
    run_detailed(s, false).map(|o| o.report)
}

/// Renders a trace as file contents, one line per event.
pub fn trace_text(lines: &[String]) -> String {
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub strategy: String,
    pub availability: Option<f64>,
    pub p95_runtime_ms: Option<u64>,
    pub total_reenrollments: u64,
    pub bounce_count: u64,
    pub maintenance_ms: u64,
    pub error: Option<String>,
}

impl CompareRow {
    fn from_result(name: String, s: &Scenario, result: Result<Report, Box<RunFailed>>) -> Self {
        let strategy = s.strategy.to_string();
        match result {
            Ok(r) => Self {
                name,
                strategy,
                availability: r.availability,
                p95_runtime_ms: r.latency(RequestKind::Runtime).p95,
                total_reenrollments: r.total_reenrollments,
                bounce_count: r.bounce_count,
                maintenance_ms: r.maintenance_ms,
                error: None,
            },
            Err(e) => Self::failed(name, strategy, e.to_string()),
        }
    }

    fn failed(name: String, strategy: String, error: String) -> Self {
        Self {
            name,
            strategy,
            availability: None,
            p95_runtime_ms: None,
            total_reenrollments: 0,
            bounce_count: 0,
            maintenance_ms: 0,
            error: Some(error),
        }
    }
}

/// Runs every scenario on its own thread; an invalid scenario or a failing
/// run becomes an error row.
pub fn compare(scenarios: &[(String, Scenario)]) -> Vec<CompareRow> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|(name, s)| {
                scope.spawn(move || match s.validate() {
                    Ok(()) => CompareRow::from_result(name.clone(), s, run(s)),
                    Err(e) => CompareRow::failed(name.clone(), s.strategy.to_string(), e.to_string()),
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect()
    })
}

pub struct CompareTable<'a>(pub &'a [CompareRow]);

impl fmt::Display for CompareTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:<36} {:>12} {:>8} {:>8} {:>8} {:>14}",
            "scenario", "strategy", "availability", "p95_ms", "reenroll", "bounces", "maintenance_ms"
        )?;
        for r in self.0 {
            if let Some(e) = &r.error {
                writeln!(f, "{:<24} {:<36} ERROR {e}", r.name, r.strategy)?;
                continue;
            }
            let avail = r.availability.map_or("-".into(), |a| format!("{a:.4}"));
            let p95 = r.p95_runtime_ms.map_or("-".into(), |p| p.to_string());
            writeln!(
                f,
                "{:<24} {:<36} {:>12} {:>8} {:>8} {:>8} {:>14}",
                r.name, r.strategy, avail, p95, r.total_reenrollments, r.bounce_count, r.maintenance_ms
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_arrivals_are_reproducible_and_bounded() {
        let s = Scenario {
            users: 3,
            devices: 1,
            duration_ms: 20_000,
            runtime_arrivals: RuntimeArrivals::PoissonRatePerUserPerS(1.0),
            seed: 9,
            ..Scenario::default()
        };
        let a = arrival_schedule(&s);
        assert_eq!(a, arrival_schedule(&s));
        assert!(a.iter().all(|(t, _)| *t <= 20_000));
        // Roughly 60 expected; a loose band guards against unit mistakes.
        assert!((30..=100).contains(&a.len()), "{}", a.len());
    }

    #[test]
    fn first_poisson_gap_matches_inverse_cdf() {
        let s = Scenario {
            users: 1,
            devices: 1,
            runtime_arrivals: RuntimeArrivals::PoissonRatePerUserPerS(2.0),
            seed: 5,
            ..Scenario::default()
        };
        let u = SimRng::for_node(5, ARRIVAL_STREAM).next_f64();
        let expected = (-(1.0 - u).ln() / 0.002).floor() as u64;
        assert_eq!(arrival_schedule(&s)[0], (expected, 0));
    }
}
