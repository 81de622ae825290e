//! Device-side agent: issues user requests in FIFO order and runs the
//! device half of each strategy (local model update, retry-with-enrollment,
//! handshakes).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::Deployment;
use crate::domain::{
    AudioSample, Candidates, EnrollmentRequest, Outcome, RecognitionResult, RuntimeRequest, UserId, UserProfile,
    VersionId,
};
use crate::engine::{EngineError, EngineInstance};
use crate::kernel::SimTime;
use crate::metrics::{RequestKind, RequestRecord};
use crate::topology::{DeviceNode, NodeId, ServerId};
use crate::world::{unexpected, EnrollPurpose, Msg, NodeCtx, Route, SimError};

/// Retries per runtime request before the run is declared broken.
const MAX_RETRIES: u32 = 8;

#[derive(Debug, Clone)]
enum Job {
    Enroll { user: UserId, submitted: SimTime },
    Runtime { user: UserId, submitted: SimTime, retried: bool },
    ModelUpdate { version: VersionId },
}

#[derive(Debug, Clone)]
struct Retry {
    server: ServerId,
    pending: VecDeque<UserId>,
    enroll_req: Option<u64>,
}

#[derive(Debug, Clone)]
enum Active {
    Enroll { req: u64, user: UserId, submitted: SimTime },
    Runtime {
        req: u64,
        user: UserId,
        submitted: SimTime,
        audio: AudioSample,
        attempts: u32,
        reenrolled: u32,
        retry: Option<Retry>,
    },
    LocalEnroll { user: UserId, submitted: SimTime, profile: UserProfile },
    LocalRuntime { user: UserId, submitted: SimTime },
    ModelUpdate { remaining: VecDeque<(UserId, Vec<AudioSample>)>, current: Option<UserProfile> },
}

#[derive(Debug, Clone)]
pub struct DeviceAgent {
    pub node: DeviceNode,
    deployment: Deployment,
    double: bool,
    /// Device-side deployment only.
    engine: Option<EngineInstance>,
    audio_duration_ms: u32,
    /// Users the backend has acknowledged (server-side deployment).
    enrolled: BTreeSet<UserId>,
    queue: VecDeque<Job>,
    active: Option<Active>,
    background: VecDeque<(UserId, Route)>,
    background_active: Option<(u64, UserId)>,
    downloading: Option<VersionId>,
    handshake_inflight: Option<(u64, SimTime)>,
    next_req: u64,
}

impl DeviceAgent {
    pub fn new(node: DeviceNode, deployment: Deployment, double: bool, engine: Option<EngineInstance>, audio_duration_ms: u32) -> Self {
        Self {
            node,
            deployment,
            double,
            engine,
            audio_duration_ms,
            enrolled: BTreeSet::new(),
            queue: VecDeque::new(),
            active: None,
            background: VecDeque::new(),
            background_active: None,
            downloading: None,
            handshake_inflight: None,
            next_req: 0,
        }
    }

    /// True while a downloaded model is being applied.
    pub fn updating(&self) -> bool {
        matches!(self.active, Some(Active::ModelUpdate { .. }))
    }

    fn req_id(&mut self) -> u64 {
        let id = self.next_req;
        self.next_req += 1;
        id
    }

    fn is_enrolled(&self, user: &str) -> bool {
        match self.deployment {
            Deployment::Server => self.enrolled.contains(user),
            _ => self.node.has_profile(user),
        }
    }

    fn audio(&self, user: &str) -> Vec<AudioSample> {
        self.node.stored_audio.get(user).cloned().unwrap_or_default()
    }

    fn record(ctx: &mut NodeCtx<'_>, kind: RequestKind, user: &str, submitted: SimTime, outcome: Outcome, reenrolled: u32) {
        ctx.log.record(RequestRecord {
            kind,
            user_id: user.to_owned(),
            submitted,
            completed: ctx.now,
            outcome,
            reenrollments_in_path: reenrolled,
        });
    }

    /// Replaces a user's stored profiles and logs the resulting newest version.
    fn store(&mut self, ctx: &mut NodeCtx<'_>, user: &str, profiles: Vec<UserProfile>) {
        let Some(written) = profiles.iter().map(|p| p.version.clone()).max() else {
            return;
        };
        let previous = self.node.newest_profile(user).map(|p| p.version.clone());
        self.node.store_profiles(user, profiles);
        let newest = self.node.newest_profile(user).map(|p| p.version.clone()).expect("just stored");
        ctx.log.profile_written(user, previous.as_ref(), &written, &newest, ctx.now);
    }

    pub fn handle(&mut self, ctx: &mut NodeCtx<'_>, msg: Msg) -> Result<(), SimError> {
        match msg {
            Msg::StartEnrollment => {
                for user in self.node.owner_users.clone() {
                    self.queue.push_back(Job::Enroll { user, submitted: ctx.now });
                }
            }
            Msg::Arrival { user } => self.queue.push_back(Job::Runtime {
                user,
                submitted: ctx.now,
                retried: false,
            }),
            Msg::LocalWorkDone => self.on_local_done(ctx)?,
            Msg::ModelAvailable { version, download_ms } => self.device_download_latest(ctx, version, download_ms),
            Msg::DownloadComplete { version } => {
                if self.downloading.as_ref() == Some(&version) {
                    self.downloading = None;
                    self.queue.retain(|j| !matches!(j, Job::ModelUpdate { .. }));
                    self.queue.push_front(Job::ModelUpdate { version });
                }
            }
            Msg::EnrollResp { req, outcome, response } => self.on_enroll_resp(ctx, req, outcome, response.profiles)?,
            Msg::RuntimeResp { req, response, reenrolled } => {
                let Some(Active::Runtime { req: r, user, submitted, reenrolled: retried, .. }) = &self.active else {
                    return Err(SimError::Protocol(format!("stray runtime response {req}")));
                };
                if *r != req {
                    return Err(SimError::Protocol(format!("stray runtime response {req}")));
                }
                let (user, submitted, total) = (user.clone(), *submitted, reenrolled + retried);
                if response.outcome == Outcome::StaleProfiles {
                    ctx.log.stale_profile_events += 1;
                    for owner in self.node.owner_users.clone() {
                        if self.node.has_profile(&owner) {
                            self.queue_background(owner, Route::Any);
                        }
                    }
                }
                Self::record(ctx, RequestKind::Runtime, &user, submitted, response.outcome, total);
                self.active = None;
            }
            Msg::RetryWithEnrollment { req, server, model } => self.on_retry(ctx, req, server, model)?,
            Msg::HandshakeTick => self.handshake_tick(ctx),
            Msg::HandshakeResp { req, target } => {
                let Some((r, submitted)) = self.handshake_inflight.take() else {
                    return Err(SimError::Protocol(format!("stray handshake response {req}")));
                };
                debug_assert_eq!(r, req);
                let user = self.node.owner_users.first().cloned().unwrap_or_default();
                Self::record(ctx, RequestKind::Handshake, &user, submitted, Outcome::Ok, 0);
                if let Some(target) = target {
                    for owner in self.node.owner_users.clone() {
                        let behind = self
                            .node
                            .newest_profile(&owner)
                            .is_some_and(|p| p.version.seq < target.seq);
                        if behind {
                            let route = if self.double { Route::Any } else { Route::Target(target.clone()) };
                            self.queue_background(owner, route);
                        }
                    }
                }
            }
            other => return Err(unexpected(NodeId::Device(self.node.device_id), &other)),
        }
        self.pump_background(ctx);
        self.pump(ctx)
    }

    pub fn device_download_latest(&mut self, ctx: &mut NodeCtx<'_>, version: VersionId, download_ms: u64) {
        if !self.node.needs_download(&version) {
            return;
        }
        if self.downloading.as_ref().is_some_and(|d| !version.is_newer_than(d)) {
            return;
        }
        self.downloading = Some(version.clone());
        ctx.out.timer(download_ms, Msg::DownloadComplete { version });
    }

    pub fn handshake_tick(&mut self, ctx: &mut NodeCtx<'_>) {
        if let Some(period) = self.node.handshake_period_ms {
            ctx.out.timer(period, Msg::HandshakeTick);
        }
        if self.handshake_inflight.is_some() {
            return;
        }
        let req = self.req_id();
        self.handshake_inflight = Some((req, ctx.now));
        ctx.out.send(
            NodeId::Frontend,
            Msg::HandshakeReq {
                device: self.node.device_id,
                req,
            },
        );
    }

    fn queue_background(&mut self, user: UserId, route: Route) {
        let busy = self.background_active.as_ref().is_some_and(|(_, u)| *u == user)
            || self.background.iter().any(|(u, _)| *u == user);
        if !busy {
            self.background.push_back((user, route));
        }
    }

    fn pump_background(&mut self, ctx: &mut NodeCtx<'_>) {
        if self.background_active.is_some() {
            return;
        }
        let Some((user, route)) = self.background.pop_front() else {
            return;
        };
        let req = self.req_id();
        self.send_enroll(ctx, req, &user, EnrollPurpose::Background, route);
        self.background_active = Some((req, user));
    }

    fn send_enroll(&mut self, ctx: &mut NodeCtx<'_>, req: u64, user: &str, purpose: EnrollPurpose, route: Route) {
        ctx.out.send(
            NodeId::Frontend,
            Msg::EnrollReq {
                device: self.node.device_id,
                req,
                request: EnrollmentRequest {
                    user_id: user.to_owned(),
                    enrollment_audio: self.audio(user),
                },
                purpose,
                route,
            },
        );
    }

    fn runtime_request(&self, audio: AudioSample, candidates: &[UserId]) -> RuntimeRequest {
        let candidates = match self.deployment {
            Deployment::Hybrid => Candidates::Profiles(
                candidates
                    .iter()
                    .map(|u| (u.clone(), self.node.stored_profiles.get(u).cloned().unwrap_or_default()))
                    .collect(),
            ),
            _ => Candidates::UserIds(candidates.to_vec()),
        };
        RuntimeRequest {
            runtime_audio: audio,
            candidates,
        }
    }

    fn pump(&mut self, ctx: &mut NodeCtx<'_>) -> Result<(), SimError> {
        while self.active.is_none() {
            let Some(job) = self.queue.pop_front() else {
                return Ok(());
            };
            self.start(ctx, job)?;
        }
        Ok(())
    }

    fn start(&mut self, ctx: &mut NodeCtx<'_>, job: Job) -> Result<(), SimError> {
        match job {
            Job::Enroll { user, submitted } => {
                if self.deployment == Deployment::Device {
                    let engine = self.engine.as_ref().expect("device-side engine");
                    let audio = self.audio(&user);
                    if audio.is_empty() {
                        ctx.log.no_stored_audio_events += 1;
                        Self::record(ctx, RequestKind::Enroll, &user, submitted, Outcome::Maintenance, 0);
                        return Ok(());
                    }
                    let profile = engine.enroll(&user, &audio)?;
                    ctx.out.timer(engine.enroll_cost_ms(audio.len()), Msg::LocalWorkDone);
                    ctx.log.initial_enrollments += 1;
                    self.active = Some(Active::LocalEnroll { user, submitted, profile });
                } else {
                    let req = self.req_id();
                    self.send_enroll(ctx, req, &user, EnrollPurpose::Initial, Route::Any);
                    self.active = Some(Active::Enroll { req, user, submitted });
                }
            }
            Job::Runtime { user, submitted, retried } => {
                let owners = self.node.owner_users.clone();
                let missing: Vec<UserId> = owners.iter().filter(|u| !self.is_enrolled(u)).cloned().collect();
                if !missing.is_empty() && !retried {
                    // Enroll the stragglers first, then come back once.
                    self.queue.push_front(Job::Runtime { user, submitted, retried: true });
                    for u in missing.into_iter().rev() {
                        self.queue.push_front(Job::Enroll { user: u, submitted: ctx.now });
                    }
                    return Ok(());
                }
                let candidates: Vec<UserId> = owners.into_iter().filter(|u| self.is_enrolled(u)).collect();
                if candidates.is_empty() {
                    Self::record(ctx, RequestKind::Runtime, &user, submitted, Outcome::Maintenance, 0);
                    return Ok(());
                }
                let audio = AudioSample {
                    speaker_id: user.clone(),
                    seed: ctx.rng.next_u64(),
                    duration_ms: self.audio_duration_ms,
                };
                if self.deployment == Deployment::Device {
                    let engine = self.engine.as_ref().expect("device-side engine");
                    let profiles: BTreeMap<UserId, UserProfile> = candidates
                        .iter()
                        .filter_map(|u| self.node.newest_profile(u).map(|p| (u.clone(), p.clone())))
                        .collect();
                    let _results: BTreeMap<UserId, RecognitionResult> =
                        engine.recognize(&audio, &profiles).inspect_err(|e| {
                            if matches!(e, EngineError::VersionMismatch { .. }) {
                                ctx.log.mismatch_violations += 1;
                            }
                        })?;
                    ctx.out.timer(engine.runtime_cost_ms(), Msg::LocalWorkDone);
                    self.active = Some(Active::LocalRuntime { user, submitted });
                } else {
                    let req = self.req_id();
                    let request = self.runtime_request(audio.clone(), &candidates);
                    ctx.out.send(
                        NodeId::Frontend,
                        Msg::RuntimeReq {
                            device: self.node.device_id,
                            req,
                            request,
                            pin: None,
                        },
                    );
                    self.active = Some(Active::Runtime {
                        req,
                        user,
                        submitted,
                        audio,
                        attempts: 0,
                        reenrolled: 0,
                        retry: None,
                    });
                }
            }
            Job::ModelUpdate { version } => {
                self.node.local_model = Some(version.clone());
                let engine = self.engine.as_ref().expect("device-side engine").with_model(version);
                self.engine = Some(engine);
                let plan = self.node.plan_reenrollment();
                for user in plan.missing_audio {
                    ctx.log.no_stored_audio_events += 1;
                    self.node.drop_profiles(&user);
                }
                self.active = Some(Active::ModelUpdate {
                    remaining: plan.users.into(),
                    current: None,
                });
                self.next_update_user(ctx)?;
            }
        }
        Ok(())
    }

    fn next_update_user(&mut self, ctx: &mut NodeCtx<'_>) -> Result<(), SimError> {
        let engine = self.engine.clone().expect("device-side engine");
        let Some(Active::ModelUpdate { remaining, current }) = &mut self.active else {
            unreachable!()
        };
        match remaining.pop_front() {
            Some((user, audio)) => {
                *current = Some(engine.enroll(&user, &audio)?);
                ctx.out.timer(engine.enroll_cost_ms(audio.len()), Msg::LocalWorkDone);
            }
            None => self.active = None,
        }
        Ok(())
    }

    fn on_local_done(&mut self, ctx: &mut NodeCtx<'_>) -> Result<(), SimError> {
        match self.active.take() {
            Some(Active::LocalEnroll { user, submitted, profile }) => {
                self.store(ctx, &user, vec![profile]);
                Self::record(ctx, RequestKind::Enroll, &user, submitted, Outcome::Ok, 0);
            }
            Some(Active::LocalRuntime { user, submitted }) => {
                Self::record(ctx, RequestKind::Runtime, &user, submitted, Outcome::Ok, 0);
            }
            Some(Active::ModelUpdate { remaining, current }) => {
                if let Some(profile) = current {
                    let user = profile.user_id.clone();
                    ctx.log.reenrolled(&user, &profile.version, ctx.now, false);
                    self.store(ctx, &user, vec![profile]);
                }
                self.active = Some(Active::ModelUpdate { remaining, current: None });
                self.next_update_user(ctx)?;
            }
            other => {
                self.active = other;
                return Err(SimError::Protocol("local completion without local work".into()));
            }
        }
        Ok(())
    }

    fn on_enroll_resp(&mut self, ctx: &mut NodeCtx<'_>, req: u64, outcome: Outcome, profiles: Vec<UserProfile>) -> Result<(), SimError> {
        if let Some(Active::Enroll { req: r, user, submitted }) = &self.active {
            if *r == req {
                let (user, submitted) = (user.clone(), *submitted);
                if outcome == Outcome::Ok {
                    match self.deployment {
                        Deployment::Server => {
                            self.enrolled.insert(user.clone());
                        }
                        _ => self.store(ctx, &user, profiles),
                    }
                }
                Self::record(ctx, RequestKind::Enroll, &user, submitted, outcome, 0);
                self.active = None;
                return Ok(());
            }
        }
        if let Some(Active::Runtime { retry: Some(retry), .. }) = &self.active {
            if retry.enroll_req == Some(req) {
                let user = retry.pending.front().cloned().expect("retry in progress");
                self.store(ctx, &user, profiles);
                if let Some(Active::Runtime { retry: Some(retry), reenrolled, .. }) = &mut self.active {
                    retry.pending.pop_front();
                    *reenrolled += 1;
                }
                return self.continue_retry(ctx);
            }
        }
        if let Some((r, user)) = self.background_active.clone() {
            if r == req {
                self.background_active = None;
                if outcome == Outcome::Ok {
                    self.store(ctx, &user, profiles);
                }
                return Ok(());
            }
        }
        Err(SimError::Protocol(format!("stray enrollment response {req}")))
    }

    fn on_retry(&mut self, ctx: &mut NodeCtx<'_>, req: u64, server: ServerId, model: VersionId) -> Result<(), SimError> {
        let owners = self.node.owner_users.clone();
        let lacking: VecDeque<UserId> = owners
            .into_iter()
            .filter(|u| {
                self.node
                    .stored_profiles
                    .get(u)
                    .is_some_and(|ps| !ps.is_empty() && !ps.iter().any(|p| p.version == model))
            })
            .collect();
        let Some(Active::Runtime { req: r, attempts, retry, .. }) = &mut self.active else {
            return Err(SimError::Protocol(format!("stray retry {req}")));
        };
        if *r != req {
            return Err(SimError::Protocol(format!("stray retry {req}")));
        }
        *attempts += 1;
        if *attempts > MAX_RETRIES {
            return Err(SimError::Protocol(format!("runtime request {req} retried {MAX_RETRIES} times")));
        }
        *retry = Some(Retry {
            server,
            pending: lacking,
            enroll_req: None,
        });
        self.continue_retry(ctx)
    }

    /// Re-enrolls the next lacking user on the retry server, or re-sends the
    /// runtime request pinned to it once everyone has a matching profile.
    fn continue_retry(&mut self, ctx: &mut NodeCtx<'_>) -> Result<(), SimError> {
        let Some(Active::Runtime { retry: Some(retry), .. }) = &self.active else {
            unreachable!()
        };
        let server = retry.server;
        if let Some(user) = retry.pending.front().cloned() {
            let req = self.req_id();
            self.send_enroll(ctx, req, &user, EnrollPurpose::RequestPath, Route::Pinned(server));
            if let Some(Active::Runtime { retry: Some(retry), .. }) = &mut self.active {
                retry.enroll_req = Some(req);
            }
            return Ok(());
        }
        let candidates: Vec<UserId> = self
            .node
            .owner_users
            .iter()
            .filter(|u| self.node.has_profile(u))
            .cloned()
            .collect();
        let Some(Active::Runtime { audio, .. }) = &self.active else {
            unreachable!()
        };
        let request = self.runtime_request(audio.clone(), &candidates);
        let req = self.req_id();
        let Some(Active::Runtime { req: r, retry, .. }) = &mut self.active else {
            unreachable!()
        };
        *r = req;
        *retry = None;
        ctx.out.send(
            NodeId::Frontend,
            Msg::RuntimeReq {
                device: self.node.device_id,
                req,
                request,
                pin: Some(server),
            },
        );
        Ok(())
    }
}
