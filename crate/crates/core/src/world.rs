//! The simulated world: every node, the messages they exchange, and the
//! kernel handler that routes events to them.
//!
//! Node handlers never touch another node's state. They emit messages into an
//! [`Outbox`]; the world then samples link latency from the sender's random
//! stream and schedules delivery.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::domain::{
    AudioSample, DomainError, EnrollmentRequest, EnrollmentResponse, Outcome, RecognitionResult,
    RuntimeRequest, RuntimeResponse, UserId, UserProfile, VersionId,
};
use crate::engine::EngineError;
use crate::kernel::{sample_latency, Event, Handler, KernelError, LatencyModel, Scheduler, SimRng, SimTime, TracePayload};
use crate::metrics::RunLog;
use crate::strategies::{DeviceAgent, FrontendController};
use crate::topology::{
    CloudServerNode, DatabaseNode, ModelStorageNode, NodeId, ProfileRow, Retention, ServerId, TopologyError,
};

/// Failures that abort a run. Each one encodes a state a correct strategy
/// must never reach.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("candidates {users:?} share no version with any available server")]
    NoCommonVersion { users: Vec<UserId> },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl SimError {
    pub fn is_mismatch(&self) -> bool {
        matches!(self, SimError::Engine(EngineError::VersionMismatch { .. }))
    }
}

/// Why a profile is being generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnrollPurpose {
    /// The user's first enrollment.
    Initial,
    /// Background upgrade: sweep, handshake or forced after staleness.
    Background,
    /// On the critical path of a runtime request.
    RequestPath,
}

impl EnrollPurpose {
    fn as_str(self) -> &'static str {
        match self {
            EnrollPurpose::Initial => "initial",
            EnrollPurpose::Background => "background",
            EnrollPurpose::RequestPath => "request-path",
        }
    }
}

/// Routing hint attached to a hybrid enrollment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Any,
    /// Follow-up of a retry: go back to the server that asked for it.
    Pinned(ServerId),
    /// Prefer a server serving exactly this version.
    Target(VersionId),
}

/// What a cloud server does when a candidate has no profile for its model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnMismatch {
    /// Re-enroll from the shipped audio before recognizing.
    Reenroll,
    /// Tell the device to re-enroll and try again.
    Retry,
    /// Recognize anyway; the engine tripwire fires on a mismatch.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateRow {
    pub user: UserId,
    pub profiles: Vec<UserProfile>,
    pub audio: Vec<AudioSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Msg {
    // Timers and workload.
    StartEnrollment,
    Arrival { user: UserId },
    HandshakeTick,
    LocalWorkDone,
    DownloadComplete { version: VersionId },
    Release { index: usize },
    SyncTick,
    UpdateComplete,
    // Model storage -> device.
    ModelAvailable { version: VersionId, download_ms: u64 },
    // Device <-> frontend.
    EnrollReq { device: usize, req: u64, request: EnrollmentRequest, purpose: EnrollPurpose, route: Route },
    EnrollResp { req: u64, outcome: Outcome, response: EnrollmentResponse },
    RuntimeReq { device: usize, req: u64, request: RuntimeRequest, pin: Option<ServerId> },
    RuntimeResp { req: u64, response: RuntimeResponse, reenrolled: u32 },
    RetryWithEnrollment { req: u64, server: ServerId, model: VersionId },
    HandshakeReq { device: usize, req: u64 },
    HandshakeResp { req: u64, target: Option<VersionId> },
    // Frontend <-> database.
    DbPutAudio { flow: u64, user: UserId, audio: Vec<AudioSample> },
    /// `None` fetches every row.
    DbFetch { flow: u64, users: Option<Vec<UserId>> },
    DbRows { flow: u64, rows: Vec<(UserId, Option<ProfileRow>)> },
    DbPutProfiles { flow: u64, profiles: Vec<UserProfile>, retain: Retention },
    DbAck { flow: u64 },
    // Frontend <-> cloud.
    CloudEnroll { flow: u64, user: UserId, audio: Vec<AudioSample>, purpose: EnrollPurpose },
    CloudEnrolled { flow: u64, server: ServerId, profile: UserProfile },
    CloudRuntime { flow: u64, audio: AudioSample, candidates: Vec<CandidateRow>, on_mismatch: OnMismatch },
    CloudRecognized {
        flow: u64,
        server: ServerId,
        model: VersionId,
        results: BTreeMap<UserId, RecognitionResult>,
        new_profiles: Vec<UserProfile>,
        reenrolled: u32,
    },
    CloudRetry { flow: u64, server: ServerId, model: VersionId },
    CloudBulkReenroll { flow: u64, rows: Vec<(UserId, Vec<AudioSample>)> },
    CloudBulkDone { flow: u64, server: ServerId, profiles: Vec<UserProfile> },
    CloudUpdate { version: VersionId, duration_range: (u64, u64) },
    CloudUpdated { server: ServerId, version: VersionId },
    SyncReq,
    SyncResp { server: ServerId, served: Vec<VersionId> },
}

fn join_users<'a>(users: impl IntoIterator<Item = &'a UserId>) -> String {
    users.into_iter().map(String::as_str).collect::<Vec<_>>().join(",")
}

fn join_versions<'a>(versions: impl IntoIterator<Item = &'a VersionId>) -> String {
    versions.into_iter().map(|v| v.id.as_str()).collect::<Vec<_>>().join(",")
}

fn profile_list(profiles: &[UserProfile]) -> String {
    profiles
        .iter()
        .map(|p| format!("{}@{}", p.user_id, p.version.id))
        .collect::<Vec<_>>()
        .join(",")
}

impl TracePayload for Msg {
    fn kind(&self) -> &'static str {
        match self {
            Msg::StartEnrollment => "StartEnrollment",
            Msg::Arrival { .. } => "Arrival",
            Msg::HandshakeTick => "HandshakeTick",
            Msg::LocalWorkDone => "LocalWorkDone",
            Msg::DownloadComplete { .. } => "DownloadComplete",
            Msg::Release { .. } => "Release",
            Msg::SyncTick => "SyncTick",
            Msg::UpdateComplete => "UpdateComplete",
            Msg::ModelAvailable { .. } => "ModelAvailable",
            Msg::EnrollReq { .. } => "EnrollReq",
            Msg::EnrollResp { .. } => "EnrollResp",
            Msg::RuntimeReq { .. } => "RuntimeReq",
            Msg::RuntimeResp { .. } => "RuntimeResp",
            Msg::RetryWithEnrollment { .. } => "RetryWithEnrollment",
            Msg::HandshakeReq { .. } => "HandshakeReq",
            Msg::HandshakeResp { .. } => "HandshakeResp",
            Msg::DbPutAudio { .. } => "DbPutAudio",
            Msg::DbFetch { .. } => "DbFetch",
            Msg::DbRows { .. } => "DbRows",
            Msg::DbPutProfiles { .. } => "DbPutProfiles",
            Msg::DbAck { .. } => "DbAck",
            Msg::CloudEnroll { .. } => "CloudEnroll",
            Msg::CloudEnrolled { .. } => "CloudEnrolled",
            Msg::CloudRuntime { .. } => "CloudRuntime",
            Msg::CloudRecognized { .. } => "CloudRecognized",
            Msg::CloudRetry { .. } => "CloudRetry",
            Msg::CloudBulkReenroll { .. } => "CloudBulkReenroll",
            Msg::CloudBulkDone { .. } => "CloudBulkDone",
            Msg::CloudUpdate { .. } => "CloudUpdate",
            Msg::CloudUpdated { .. } => "CloudUpdated",
            Msg::SyncReq => "SyncReq",
            Msg::SyncResp { .. } => "SyncResp",
        }
    }

    fn summary(&self) -> String {
        match self {
            Msg::StartEnrollment | Msg::HandshakeTick | Msg::LocalWorkDone | Msg::SyncTick => "-".into(),
            Msg::UpdateComplete | Msg::SyncReq => "-".into(),
            Msg::Arrival { user } => format!("user={user}"),
            Msg::DownloadComplete { version } => format!("version={version}"),
            Msg::Release { index } => format!("release={index}"),
            Msg::ModelAvailable { version, download_ms } => {
                format!("version={version} download={download_ms}ms")
            }
            Msg::EnrollReq { device, req, request, purpose, route } => {
                let route = match route {
                    Route::Any => "any".to_string(),
                    Route::Pinned(s) => format!("pin:{s}"),
                    Route::Target(v) => format!("target:{v}"),
                };
                format!(
                    "device={device} req={req} user={} samples={} purpose={} route={route}",
                    request.user_id,
                    request.enrollment_audio.len(),
                    purpose.as_str()
                )
            }
            Msg::EnrollResp { req, outcome, response } => format!(
                "req={req} outcome={} profiles=[{}]",
                outcome.as_str(),
                profile_list(&response.profiles)
            ),
            Msg::RuntimeReq { device, req, request, pin } => {
                let mut s = format!("device={device} req={req} speaker={}", request.runtime_audio.speaker_id);
                match &request.candidates {
                    crate::domain::Candidates::UserIds(ids) => {
                        let _ = write!(s, " candidates={}", join_users(ids));
                    }
                    crate::domain::Candidates::Profiles(map) => {
                        let parts: Vec<String> = map
                            .iter()
                            .map(|(u, ps)| format!("{u}@{}", join_versions(ps.iter().map(|p| &p.version))))
                            .collect();
                        let _ = write!(s, " candidates={}", parts.join(";"));
                    }
                }
                if let Some(pin) = pin {
                    let _ = write!(s, " pin={pin}");
                }
                s
            }
            Msg::RuntimeResp { req, response, reenrolled } => format!(
                "req={req} outcome={} accepted={} reenrolled={reenrolled}",
                response.outcome.as_str(),
                join_users(response.results.iter().filter(|(_, r)| r.accepted).map(|(u, _)| u))
            ),
            Msg::RetryWithEnrollment { req, server, model } => {
                format!("req={req} server={server} model={model}")
            }
            Msg::HandshakeReq { device, req } => format!("device={device} req={req}"),
            Msg::HandshakeResp { req, target } => format!(
                "req={req} target={}",
                target.as_ref().map(|v| v.id.as_str()).unwrap_or("-")
            ),
            Msg::DbPutAudio { flow, user, audio } => {
                format!("flow={flow} user={user} samples={}", audio.len())
            }
            Msg::DbFetch { flow, users } => match users {
                Some(users) => format!("flow={flow} users={}", join_users(users)),
                None => format!("flow={flow} users=*"),
            },
            Msg::DbRows { flow, rows } => {
                let parts: Vec<String> = rows
                    .iter()
                    .map(|(u, row)| match row {
                        Some(row) => format!("{u}@{}", join_versions(row.profiles.iter().map(|p| &p.version))),
                        None => format!("{u}@-"),
                    })
                    .collect();
                format!("flow={flow} rows={}", parts.join(";"))
            }
            Msg::DbPutProfiles { flow, profiles, retain } => {
                let retain = match retain {
                    Retention::Keep(n) => n.to_string(),
                    Retention::All => "all".into(),
                };
                format!("flow={flow} profiles=[{}] retain={retain}", profile_list(profiles))
            }
            Msg::DbAck { flow } => format!("flow={flow}"),
            Msg::CloudEnroll { flow, user, audio, purpose } => format!(
                "flow={flow} user={user} samples={} purpose={}",
                audio.len(),
                purpose.as_str()
            ),
            Msg::CloudEnrolled { flow, server, profile } => format!(
                "flow={flow} server={server} profile={}@{}",
                profile.user_id, profile.version
            ),
            Msg::CloudRuntime { flow, audio, candidates, on_mismatch } => {
                let parts: Vec<String> = candidates
                    .iter()
                    .map(|c| format!("{}@{}", c.user, join_versions(c.profiles.iter().map(|p| &p.version))))
                    .collect();
                format!(
                    "flow={flow} speaker={} candidates={} on_mismatch={on_mismatch:?}",
                    audio.speaker_id,
                    parts.join(";")
                )
            }
            Msg::CloudRecognized { flow, server, model, results, new_profiles, reenrolled } => format!(
                "flow={flow} server={server} model={model} accepted={} new=[{}] reenrolled={reenrolled}",
                join_users(results.iter().filter(|(_, r)| r.accepted).map(|(u, _)| u)),
                profile_list(new_profiles)
            ),
            Msg::CloudRetry { flow, server, model } => format!("flow={flow} server={server} model={model}"),
            Msg::CloudBulkReenroll { flow, rows } => {
                format!("flow={flow} users={}", join_users(rows.iter().map(|(u, _)| u)))
            }
            Msg::CloudBulkDone { flow, server, profiles } => {
                format!("flow={flow} server={server} profiles=[{}]", profile_list(profiles))
            }
            Msg::CloudUpdate { version, duration_range } => format!(
                "version={version} duration={}..{}ms",
                duration_range.0, duration_range.1
            ),
            Msg::CloudUpdated { server, version } => format!("server={server} version={version}"),
            Msg::SyncResp { server, served } => format!("server={server} served={}", join_versions(served)),
        }
    }
}

/// Messages and timers produced by one handler invocation.
#[derive(Debug, Default)]
pub struct Outbox {
    items: Vec<Outgoing>,
}

#[derive(Debug)]
enum Outgoing {
    Send { to: NodeId, processing_ms: u64, msg: Msg },
    Timer { delay_ms: u64, msg: Msg },
}

impl Outbox {
    pub fn send(&mut self, to: NodeId, msg: Msg) {
        self.send_after(0, to, msg);
    }

    /// Sends once `processing_ms` of local work is done; link latency is added on top.
    pub fn send_after(&mut self, processing_ms: u64, to: NodeId, msg: Msg) {
        self.items.push(Outgoing::Send { to, processing_ms, msg });
    }

    pub fn timer(&mut self, delay_ms: u64, msg: Msg) {
        self.items.push(Outgoing::Timer { delay_ms, msg });
    }
}

/// Per-invocation context handed to node handlers.
pub struct NodeCtx<'a> {
    pub now: SimTime,
    pub out: &'a mut Outbox,
    pub log: &'a mut RunLog,
    pub rng: &'a mut SimRng,
}

/// One-way latency per link class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Links {
    pub device_frontend: LatencyModel,
    pub frontend_cloud: LatencyModel,
    pub frontend_db: LatencyModel,
    pub device_storage: LatencyModel,
}

impl Links {
    pub fn between(&self, a: NodeId, b: NodeId) -> LatencyModel {
        use NodeId::*;
        match (a, b) {
            (Device(_), Frontend) | (Frontend, Device(_)) => self.device_frontend,
            (Frontend, Cloud(_)) | (Cloud(_), Frontend) => self.frontend_cloud,
            (Frontend, Database) | (Database, Frontend) => self.frontend_db,
            (Device(_), Storage) | (Storage, Device(_)) => self.device_storage,
            _ => LatencyModel::ZERO,
        }
    }
}

pub struct World {
    pub links: Links,
    pub storage: ModelStorageNode,
    pub frontend: FrontendController,
    pub db: DatabaseNode,
    pub clouds: Vec<CloudServerNode>,
    pub devices: Vec<DeviceAgent>,
    pub log: RunLog,
    rngs: Vec<SimRng>,
}

impl World {
    pub fn new(
        seed: u64,
        links: Links,
        storage: ModelStorageNode,
        frontend: FrontendController,
        clouds: Vec<CloudServerNode>,
        devices: Vec<DeviceAgent>,
    ) -> Self {
        let n = 3 + clouds.len() + devices.len();
        let rngs = (0..n as u64).map(|i| SimRng::for_node(seed, i)).collect();
        Self {
            links,
            storage,
            frontend,
            db: DatabaseNode::new(),
            clouds,
            devices,
            log: RunLog::default(),
            rngs,
        }
    }

    fn stream(&self, node: NodeId) -> usize {
        node.stream_index(self.clouds.len()) as usize
    }

    fn flush(&mut self, sched: &mut Scheduler<NodeId, Msg>, from: NodeId, out: Outbox) {
        let stream = self.stream(from);
        for item in out.items {
            match item {
                Outgoing::Send { to, processing_ms, msg } => {
                    let latency = sample_latency(&self.links.between(from, to), &mut self.rngs[stream]);
                    sched.schedule_in(processing_ms + latency, to, msg);
                }
                Outgoing::Timer { delay_ms, msg } => {
                    sched.schedule_in(delay_ms, from, msg);
                }
            }
        }
    }

    fn on_cloud(&mut self, s: usize, ctx: &mut NodeCtx<'_>, msg: Msg) -> Result<(), SimError> {
        let server = &mut self.clouds[s];
        let id = server.server_id;
        match msg {
            Msg::CloudEnroll { flow, user, audio, purpose } => {
                let engine = server.engine();
                let profile = engine.enroll(&user, &audio)?;
                if purpose != EnrollPurpose::Initial {
                    ctx.log.reenrolled(&user, engine.model(), ctx.now, purpose == EnrollPurpose::RequestPath);
                }
                let cost = engine.enroll_cost_ms(audio.len());
                ctx.out
                    .send_after(cost, NodeId::Frontend, Msg::CloudEnrolled { flow, server: id, profile });
            }
            Msg::CloudRuntime { flow, audio, candidates, on_mismatch } => {
                let engine = server.engine().clone();
                let model = engine.model().clone();
                let mut cost = 0;
                let mut profiles = BTreeMap::new();
                let mut new_profiles = Vec::new();
                for c in &candidates {
                    let matching = c.profiles.iter().find(|p| p.version == model);
                    let profile = match (matching, on_mismatch) {
                        (Some(p), _) => p.clone(),
                        (None, OnMismatch::Retry) => {
                            ctx.out.send(
                                NodeId::Frontend,
                                Msg::CloudRetry { flow, server: id, model },
                            );
                            return Ok(());
                        }
                        (None, OnMismatch::Reenroll) => {
                            let p = engine.enroll(&c.user, &c.audio)?;
                            cost += engine.enroll_cost_ms(c.audio.len());
                            ctx.log.reenrolled(&c.user, &model, ctx.now, true);
                            new_profiles.push(p.clone());
                            p
                        }
                        (None, OnMismatch::Strict) => match c.profiles.last() {
                            Some(p) => p.clone(),
                            None => return Err(TopologyError::UnknownUser(c.user.clone()).into()),
                        },
                    };
                    profiles.insert(c.user.clone(), profile);
                }
                let results = engine.recognize(&audio, &profiles).inspect_err(|e| {
                    if matches!(e, EngineError::VersionMismatch { .. }) {
                        ctx.log.mismatch_violations += 1;
                    }
                })?;
                cost += engine.runtime_cost_ms();
                let reenrolled = new_profiles.len() as u32;
                ctx.out.send_after(
                    cost,
                    NodeId::Frontend,
                    Msg::CloudRecognized { flow, server: id, model, results, new_profiles, reenrolled },
                );
            }
            Msg::CloudBulkReenroll { flow, rows } => {
                let engine = server.engine();
                let mut cost = 0;
                let mut profiles = Vec::with_capacity(rows.len());
                for (user, audio) in &rows {
                    profiles.push(engine.enroll(user, audio)?);
                    cost += engine.enroll_cost_ms(audio.len());
                    ctx.log.reenrolled(user, engine.model(), ctx.now, false);
                }
                ctx.out
                    .send_after(cost, NodeId::Frontend, Msg::CloudBulkDone { flow, server: id, profiles });
            }
            Msg::CloudUpdate { version, duration_range: (lo, hi) } => {
                let duration = ctx.rng.next_in_range(lo.min(hi), hi.max(lo));
                if server.begin_update(version, ctx.now.after(duration)) {
                    ctx.out.timer(duration, Msg::UpdateComplete);
                }
            }
            Msg::UpdateComplete => {
                if let Some(version) = server.complete_update(ctx.now) {
                    ctx.out.send(NodeId::Frontend, Msg::CloudUpdated { server: id, version });
                }
            }
            Msg::SyncReq => {
                let served = server.served_versions().into_iter().collect();
                ctx.out.send(NodeId::Frontend, Msg::SyncResp { server: id, served });
            }
            other => return Err(unexpected(NodeId::Cloud(id), &other)),
        }
        Ok(())
    }

    fn on_db(&mut self, ctx: &mut NodeCtx<'_>, msg: Msg) -> Result<(), SimError> {
        match msg {
            Msg::DbPutAudio { flow, user, audio } => {
                self.db.put_audio(&user, audio);
                ctx.out.send(NodeId::Frontend, Msg::DbAck { flow });
            }
            Msg::DbFetch { flow, users } => {
                let rows = match users {
                    Some(users) => users
                        .into_iter()
                        .map(|u| {
                            let row = self.db.row(&u).cloned();
                            (u, row)
                        })
                        .collect(),
                    None => self.db.rows().map(|(u, r)| (u.clone(), Some(r.clone()))).collect(),
                };
                ctx.out.send(NodeId::Frontend, Msg::DbRows { flow, rows });
            }
            Msg::DbPutProfiles { flow, profiles, retain } => {
                for p in profiles {
                    let user = p.user_id.clone();
                    let written = p.version.clone();
                    let previous = self.db.row(&user).and_then(|r| r.newest()).map(|p| p.version.clone());
                    self.db.put_profile(p, retain)?;
                    let newest = self
                        .db
                        .row(&user)
                        .and_then(|r| r.newest())
                        .map(|p| p.version.clone())
                        .expect("row just written");
                    ctx.log
                        .profile_written(&user, previous.as_ref(), &written, &newest, ctx.now);
                }
                ctx.out.send(NodeId::Frontend, Msg::DbAck { flow });
            }
            other => return Err(unexpected(NodeId::Database, &other)),
        }
        Ok(())
    }

    fn on_storage(&mut self, ctx: &mut NodeCtx<'_>, msg: Msg) -> Result<(), SimError> {
        match msg {
            Msg::Release { index } => {
                self.storage.publish(index);
                let latest = self.storage.latest_release().clone();
                for d in 0..self.devices.len() {
                    ctx.out.send(
                        NodeId::Device(d),
                        Msg::ModelAvailable {
                            version: latest.version.clone(),
                            download_ms: latest.download_ms,
                        },
                    );
                }
                Ok(())
            }
            other => Err(unexpected(NodeId::Storage, &other)),
        }
    }
}

pub(crate) fn unexpected(node: NodeId, msg: &Msg) -> SimError {
    SimError::Protocol(format!("{node} cannot handle {}", msg.kind()))
}

impl Handler<NodeId, Msg> for World {
    type Error = SimError;

    fn handle(&mut self, sched: &mut Scheduler<NodeId, Msg>, event: Event<NodeId, Msg>) -> Result<(), SimError> {
        let target = event.target;
        let mut out = Outbox::default();
        let stream = self.stream(target);
        // The node's stream is moved out for the call so handlers can borrow
        // their own node mutably alongside it.
        let mut rng = std::mem::replace(&mut self.rngs[stream], SimRng::new(0));
        let mut log = std::mem::take(&mut self.log);
        let result = {
            let mut ctx = NodeCtx {
                now: sched.now(),
                out: &mut out,
                log: &mut log,
                rng: &mut rng,
            };
            match target {
                NodeId::Cloud(s) => self.on_cloud(s.0, &mut ctx, event.payload),
                NodeId::Database => self.on_db(&mut ctx, event.payload),
                NodeId::Storage => self.on_storage(&mut ctx, event.payload),
                NodeId::Frontend => self.frontend.handle(&mut ctx, event.payload),
                NodeId::Device(d) => self.devices[d].handle(&mut ctx, event.payload),
            }
        };
        self.rngs[stream] = rng;
        self.log = log;
        result?;
        self.flush(sched, target, out);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_classes() {
        let links = Links {
            device_frontend: LatencyModel::fixed(1),
            frontend_cloud: LatencyModel::fixed(2),
            frontend_db: LatencyModel::fixed(3),
            device_storage: LatencyModel::fixed(4),
        };
        assert_eq!(links.between(NodeId::Device(3), NodeId::Frontend).base_ms, 1);
        assert_eq!(links.between(NodeId::Cloud(ServerId(0)), NodeId::Frontend).base_ms, 2);
        assert_eq!(links.between(NodeId::Frontend, NodeId::Database).base_ms, 3);
        assert_eq!(links.between(NodeId::Storage, NodeId::Device(0)).base_ms, 4);
        assert_eq!(links.between(NodeId::Frontend, NodeId::Frontend), LatencyModel::ZERO);
    }

    #[test]
    fn trace_summaries_are_single_line() {
        let msg = Msg::DbPutProfiles {
            flow: 3,
            profiles: vec![UserProfile {
                user_id: "u1".into(),
                version: VersionId::new("V2", 2),
                digest: 1,
            }],
            retain: Retention::Keep(2),
        };
        assert_eq!(msg.kind(), "DbPutProfiles");
        assert_eq!(msg.summary(), "flow=3 profiles=[u1@V2] retain=2");
        assert!(!msg.summary().contains('\t') && !msg.summary().contains('\n'));
    }
}
