//! Frontend-side strategy logic: release rollouts, request flows and dispatch.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{Deployment, Mitigation, Policy, StrategyConfig};
use crate::domain::{
    validate_enrollment_request, AudioSample, Candidates, EnrollmentRequest, EnrollmentResponse, Outcome,
    RecognitionResult, RuntimeRequest, RuntimeResponse, UserId, UserProfile, VersionId,
};
use crate::topology::{
    FrontendNode, ModelRelease, NodeId, ProfileRow, Retention, ServerId, TopologyError, VersionRequirement,
    VersionTable,
};
use crate::world::{unexpected, CandidateRow, EnrollPurpose, Msg, NodeCtx, OnMismatch, Route, SimError};

/// Highest version held by every candidate and served by an available server.
pub fn choose_common_version(candidates: &[Vec<VersionId>], available: &[VersionId]) -> Option<VersionId> {
    available
        .iter()
        .filter(|v| candidates.iter().all(|held| held.contains(v)))
        .max()
        .cloned()
}

#[derive(Debug, Clone)]
struct Group {
    servers: Vec<ServerId>,
    version: VersionId,
    updating: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OfflineStage {
    Draining,
    Updating,
    Reenrolling,
}

#[derive(Debug, Clone)]
enum Rollout {
    Offline { index: usize, stage: OfflineStage, pending: usize },
    Online { pending: usize },
    Double { index: usize, group: usize, pending: usize, sweeping: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EnrollStage {
    StoringAudio,
    Enrolling,
    StoringProfiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RuntimeStage {
    Fetching,
    Recognizing,
    WritingBack,
}

#[derive(Debug, Clone)]
enum Flow {
    Enroll {
        device: usize,
        req: u64,
        user: UserId,
        audio: Vec<AudioSample>,
        purpose: EnrollPurpose,
        stage: EnrollStage,
        todo: VecDeque<VersionId>,
        produced: Vec<UserProfile>,
    },
    Runtime {
        device: usize,
        req: u64,
        request: RuntimeRequest,
        stage: RuntimeStage,
        results: BTreeMap<UserId, RecognitionResult>,
        reenrolled: u32,
    },
    /// Offline maintenance: fetch every row, bulk re-enroll, write back.
    Bulk { pending: usize, profiles: Vec<UserProfile> },
    SweepFetch,
    Upgrade { sweep: bool },
}

/// Frontend node plus the release controller and per-request flow state.
#[derive(Debug, Clone)]
pub struct FrontendController {
    node: FrontendNode,
    strategy: StrategyConfig,
    releases: Vec<ModelRelease>,
    /// Model each server reported after its last completed update.
    fleet: BTreeMap<ServerId, VersionId>,
    groups: Vec<Group>,
    reenroll_parallelism: usize,
    flows: BTreeMap<u64, Flow>,
    next_flow: u64,
    /// User-visible server-side flows still running; drained before an offline update.
    inflight: usize,
    rollout: Option<Rollout>,
    queued: VecDeque<usize>,
    /// Newest release whose rollout has started.
    latest_started: VersionId,
    held: Vec<Msg>,
    upgraded: BTreeSet<(UserId, u64)>,
    upgrades_in_flight: usize,
    sweep: VecDeque<(UserId, Vec<AudioSample>)>,
    sweep_active: bool,
}

impl FrontendController {
    /// `initial` holds the versions deployed at time zero, oldest first: one
    /// for single-version policies, two for double.
    pub fn new(
        strategy: StrategyConfig,
        cloud_servers: usize,
        initial: &[VersionId],
        releases: Vec<ModelRelease>,
        reenroll_parallelism: usize,
    ) -> Self {
        let servers: Vec<ServerId> = (0..cloud_servers).map(ServerId).collect();
        let newest = initial.last().cloned().expect("at least one initial version");
        let mut fleet = BTreeMap::new();
        let mut groups = Vec::new();
        if strategy.is_double() {
            let half = cloud_servers / 2;
            let older = initial.first().cloned().expect("initial version");
            groups.push(Group {
                servers: servers[..half].to_vec(),
                version: older,
                updating: false,
            });
            groups.push(Group {
                servers: servers[half..].to_vec(),
                version: newest.clone(),
                updating: false,
            });
            for g in &groups {
                for s in &g.servers {
                    fleet.insert(*s, g.version.clone());
                }
            }
        } else {
            for s in &servers {
                fleet.insert(*s, newest.clone());
            }
        }
        let table: Option<VersionTable> = (strategy.mitigation == Mitigation::SyncTable).then(|| {
            fleet
                .iter()
                .map(|(s, v)| (*s, BTreeSet::from([v.clone()])))
                .collect()
        });
        Self {
            node: FrontendNode::new(strategy.effective_dispatch(), servers, table),
            strategy,
            releases,
            fleet,
            groups,
            reenroll_parallelism: reenroll_parallelism.max(1),
            flows: BTreeMap::new(),
            next_flow: 0,
            inflight: 0,
            rollout: None,
            queued: VecDeque::new(),
            latest_started: newest,
            held: Vec::new(),
            upgraded: BTreeSet::new(),
            upgrades_in_flight: 0,
            sweep: VecDeque::new(),
            sweep_active: false,
        }
    }

    pub fn node(&self) -> &FrontendNode {
        &self.node
    }

    pub fn rollout_active(&self) -> bool {
        self.rollout.is_some()
    }

    /// Versions that can currently be dispatched to, ascending.
    pub fn available_versions(&self) -> Vec<VersionId> {
        let mut v: Vec<VersionId> = if self.strategy.is_double() {
            self.groups
                .iter()
                .filter(|g| !g.updating)
                .map(|g| g.version.clone())
                .collect()
        } else {
            self.fleet.values().cloned().collect()
        };
        v.sort();
        v.dedup();
        v
    }

    fn retention(&self) -> Retention {
        match (self.strategy.policy, self.strategy.mitigation) {
            (Policy::Double, _) => Retention::Keep(2),
            (_, Mitigation::MultiProfile) => Retention::All,
            _ => Retention::Keep(1),
        }
    }

    fn flow_id(&mut self, flow: Flow) -> u64 {
        let id = self.next_flow;
        self.next_flow += 1;
        self.flows.insert(id, flow);
        id
    }

    fn fleet_table(&self) -> VersionTable {
        self.fleet
            .iter()
            .map(|(s, v)| (*s, BTreeSet::from([v.clone()])))
            .collect()
    }

    fn group_of(&self, version: &VersionId) -> Option<usize> {
        self.groups
            .iter()
            .position(|g| !g.updating && &g.version == version)
    }

    fn dispatch_to_version(&mut self, ctx: &mut NodeCtx<'_>, version: &VersionId, key: &str) -> Result<ServerId, SimError> {
        let g = self.group_of(version).ok_or(TopologyError::NoEligibleServer)?;
        let pool = self.groups[g].servers.clone();
        Ok(self.node.dispatch_in(&pool, key, &VersionRequirement::Any, None, ctx.rng)?)
    }

    fn log_fleet(&self, ctx: &mut NodeCtx<'_>) {
        ctx.log.fleet_changed(ctx.now, self.available_versions());
    }

    pub fn handle(&mut self, ctx: &mut NodeCtx<'_>, msg: Msg) -> Result<(), SimError> {
        match msg {
            Msg::Release { index } => {
                if self.rollout.is_some() {
                    self.queued.push_back(index);
                    Ok(())
                } else {
                    self.start_rollout(ctx, index)
                }
            }
            Msg::CloudUpdated { server, version } => self.on_updated(ctx, server, version),
            msg @ Msg::EnrollReq { .. } => self.on_enroll_req(ctx, msg),
            Msg::RuntimeReq { device, req, request, pin } => self.on_runtime_req(ctx, device, req, request, pin),
            Msg::HandshakeReq { device, req } => {
                let target = match self.strategy.policy {
                    Policy::Double => Some(self.latest_started.clone()),
                    _ => self.fleet.values().min().cloned(),
                };
                ctx.out
                    .send(NodeId::Device(device), Msg::HandshakeResp { req, target });
                Ok(())
            }
            Msg::DbAck { flow } => self.on_db_ack(ctx, flow),
            Msg::DbRows { flow, rows } => self.on_db_rows(ctx, flow, rows),
            Msg::CloudEnrolled { flow, server, profile } => {
                self.observe(server, profile.version.clone());
                self.on_enrolled(ctx, flow, profile)
            }
            Msg::CloudRecognized { flow, server, model, results, new_profiles, reenrolled } => {
                self.observe(server, model);
                self.on_recognized(ctx, flow, results, new_profiles, reenrolled)
            }
            Msg::CloudRetry { flow, server, model } => {
                let Some(Flow::Runtime { device, req, .. }) = self.flows.remove(&flow) else {
                    return Err(SimError::Protocol(format!("retry for unknown flow {flow}")));
                };
                ctx.out.send(
                    NodeId::Device(device),
                    Msg::RetryWithEnrollment { req, server, model },
                );
                Ok(())
            }
            Msg::CloudBulkDone { flow, profiles, .. } => self.on_bulk_done(ctx, flow, profiles),
            Msg::SyncTick => {
                self.version_table_refresh(ctx);
                Ok(())
            }
            Msg::SyncResp { server, served } => {
                if let Some(v) = served.into_iter().max() {
                    self.observe(server, v);
                }
                Ok(())
            }
            other => Err(unexpected(NodeId::Frontend, &other)),
        }
    }

    /// Folds a version a server was seen serving into the sync table. Servers
    /// never downgrade, so an entry only moves forward; this keeps a late
    /// sync reply from overwriting fresher knowledge taken from a response.
    fn observe(&mut self, server: ServerId, version: VersionId) {
        let Some(table) = &self.node.version_table else {
            return;
        };
        let known = table.get(&server).and_then(|set| set.iter().max());
        if known.is_none_or(|k| version.is_newer_than(k)) {
            self.node.record_sync(server, BTreeSet::from([version]));
        }
    }

    /// Queries every server and re-arms the refresh timer.
    pub fn version_table_refresh(&mut self, ctx: &mut NodeCtx<'_>) {
        for s in self.node.servers() {
            ctx.out.send(NodeId::Cloud(*s), Msg::SyncReq);
        }
        ctx.out.timer(self.strategy.sync_period_ms, Msg::SyncTick);
    }

    // ---- rollouts ----------------------------------------------------------

    fn command_update(&self, ctx: &mut NodeCtx<'_>, servers: &[ServerId], rel: &ModelRelease) {
        for s in servers {
            ctx.out.send(
                NodeId::Cloud(*s),
                Msg::CloudUpdate {
                    version: rel.version.clone(),
                    duration_range: rel.server_update_ms_range,
                },
            );
        }
    }

    fn start_rollout(&mut self, ctx: &mut NodeCtx<'_>, index: usize) -> Result<(), SimError> {
        let rel = self.releases[index].clone();
        self.latest_started = rel.version.clone();
        match self.strategy.policy {
            Policy::SingleOffline => self.offline_apply_release(ctx, index),
            Policy::SingleOnline => {
                let servers = self.node.servers().to_vec();
                self.command_update(ctx, &servers, &rel);
                self.rollout = Some(Rollout::Online { pending: servers.len() });
            }
            Policy::Double => self.double_apply_release(ctx, index),
        }
        Ok(())
    }

    pub fn offline_apply_release(&mut self, ctx: &mut NodeCtx<'_>, index: usize) {
        self.node.maintenance = true;
        ctx.log.maintenance_started(ctx.now);
        self.rollout = Some(Rollout::Offline {
            index,
            stage: OfflineStage::Draining,
            pending: self.node.servers().len(),
        });
        self.maybe_begin_offline_update(ctx);
    }

    fn maybe_begin_offline_update(&mut self, ctx: &mut NodeCtx<'_>) {
        if self.inflight > 0 {
            return;
        }
        if let Some(Rollout::Offline { index, stage, .. }) = &mut self.rollout {
            if *stage == OfflineStage::Draining {
                *stage = OfflineStage::Updating;
                let rel = self.releases[*index].clone();
                let servers = self.node.servers().to_vec();
                self.command_update(ctx, &servers, &rel);
            }
        }
    }

    /// Retires the group serving the oldest version; it stays out of
    /// dispatch until every member has updated.
    pub fn double_apply_release(&mut self, ctx: &mut NodeCtx<'_>, index: usize) {
        let rel = self.releases[index].clone();
        let g = if self.groups[0].version <= self.groups[1].version { 0 } else { 1 };
        self.groups[g].updating = true;
        let servers = self.groups[g].servers.clone();
        self.log_fleet(ctx);
        self.command_update(ctx, &servers, &rel);
        self.rollout = Some(Rollout::Double {
            index,
            group: g,
            pending: servers.len(),
            sweeping: false,
        });
    }

    fn on_updated(&mut self, ctx: &mut NodeCtx<'_>, server: ServerId, version: VersionId) -> Result<(), SimError> {
        self.fleet.insert(server, version);
        let done = match &mut self.rollout {
            Some(Rollout::Offline { pending, .. })
            | Some(Rollout::Online { pending, .. })
            | Some(Rollout::Double { pending, .. }) => {
                *pending = pending.saturating_sub(1);
                *pending == 0
            }
            None => return Err(SimError::Protocol(format!("{server} updated outside a rollout"))),
        };
        if !self.strategy.is_double() {
            self.log_fleet(ctx);
        }
        if !done {
            return Ok(());
        }
        match self.rollout.clone() {
            Some(Rollout::Offline { index, .. }) => {
                self.rollout = Some(Rollout::Offline {
                    index,
                    stage: OfflineStage::Reenrolling,
                    pending: 0,
                });
                let flow = self.flow_id(Flow::Bulk {
                    pending: 0,
                    profiles: Vec::new(),
                });
                ctx.out.send(NodeId::Database, Msg::DbFetch { flow, users: None });
            }
            Some(Rollout::Online { .. }) => self.finish_rollout(ctx)?,
            Some(Rollout::Double { index, group, .. }) => {
                self.groups[group].version = self.releases[index].version.clone();
                self.groups[group].updating = false;
                self.log_fleet(ctx);
                if self.strategy.deployment == Deployment::Hybrid {
                    // Release held enrollments before any queued rollout can hold them again.
                    self.rollout = None;
                    for msg in std::mem::take(&mut self.held) {
                        self.on_enroll_req(ctx, msg)?;
                    }
                    self.finish_rollout(ctx)?;
                } else {
                    self.rollout = Some(Rollout::Double {
                        index,
                        group,
                        pending: 0,
                        sweeping: true,
                    });
                    let flow = self.flow_id(Flow::SweepFetch);
                    ctx.out.send(NodeId::Database, Msg::DbFetch { flow, users: None });
                }
            }
            None => unreachable!(),
        }
        Ok(())
    }

    fn finish_rollout(&mut self, ctx: &mut NodeCtx<'_>) -> Result<(), SimError> {
        self.rollout = None;
        match self.queued.pop_front() {
            Some(next) => self.start_rollout(ctx, next),
            None => Ok(()),
        }
    }

    /// Advances the background sweep; one user is upgraded at a time.
    fn sweep_next(&mut self, ctx: &mut NodeCtx<'_>) -> Result<(), SimError> {
        if self.sweep_active {
            return Ok(());
        }
        let target = self.available_versions().last().cloned().expect("a served version");
        while let Some((user, audio)) = self.sweep.pop_front() {
            if self.spawn_upgrade(ctx, user, audio, &target, true)? {
                return Ok(());
            }
        }
        if self.upgrades_in_flight == 0 {
            self.finish_rollout(ctx)?;
        }
        Ok(())
    }

    fn sweeping(&self) -> bool {
        matches!(self.rollout, Some(Rollout::Double { sweeping: true, .. }))
    }

    /// Starts a background enrollment of `user` at `target` unless one has
    /// already been started. Returns whether a flow was started.
    fn spawn_upgrade(
        &mut self,
        ctx: &mut NodeCtx<'_>,
        user: UserId,
        audio: Vec<AudioSample>,
        target: &VersionId,
        sweep: bool,
    ) -> Result<bool, SimError> {
        if !self.upgraded.insert((user.clone(), target.seq)) {
            return Ok(false);
        }
        let server = self.dispatch_to_version(ctx, target, &user)?;
        self.upgrades_in_flight += 1;
        self.sweep_active |= sweep;
        let flow = self.flow_id(Flow::Upgrade { sweep });
        ctx.out.send(
            NodeId::Cloud(server),
            Msg::CloudEnroll {
                flow,
                user,
                audio,
                purpose: EnrollPurpose::Background,
            },
        );
        Ok(true)
    }

    // ---- enrollment --------------------------------------------------------

    fn reply_enroll(ctx: &mut NodeCtx<'_>, device: usize, req: u64, outcome: Outcome, profiles: Vec<UserProfile>) {
        ctx.out.send(
            NodeId::Device(device),
            Msg::EnrollResp {
                req,
                outcome,
                response: EnrollmentResponse { profiles },
            },
        );
    }

    fn on_enroll_req(&mut self, ctx: &mut NodeCtx<'_>, msg: Msg) -> Result<(), SimError> {
        let Msg::EnrollReq { device, req, request, purpose, route } = msg else {
            unreachable!()
        };
        validate_enrollment_request(&request)?;
        let hybrid = self.strategy.deployment == Deployment::Hybrid;
        if !hybrid && self.node.maintenance {
            Self::reply_enroll(ctx, device, req, Outcome::Maintenance, Vec::new());
            return Ok(());
        }
        if hybrid && self.strategy.is_double() && self.rollout.is_some() {
            self.held.push(Msg::EnrollReq { device, req, request, purpose, route });
            return Ok(());
        }
        let EnrollmentRequest { user_id, enrollment_audio } = request;
        let todo: VecDeque<VersionId> = if self.strategy.is_double() {
            self.available_versions().into()
        } else {
            VecDeque::new()
        };
        let flow = self.flow_id(Flow::Enroll {
            device,
            req,
            user: user_id.clone(),
            audio: enrollment_audio.clone(),
            purpose,
            stage: EnrollStage::StoringAudio,
            todo,
            produced: Vec::new(),
        });
        if hybrid {
            return self.enroll_next(ctx, flow, Some(route));
        }
        self.inflight += 1;
        ctx.out.send(
            NodeId::Database,
            Msg::DbPutAudio {
                flow,
                user: user_id,
                audio: enrollment_audio,
            },
        );
        Ok(())
    }

    /// Sends the next engine enrollment of a flow, or finishes its engine stage.
    fn enroll_next(&mut self, ctx: &mut NodeCtx<'_>, flow: u64, route: Option<Route>) -> Result<(), SimError> {
        let double = self.strategy.is_double();
        let available = self.available_versions();
        let Some(Flow::Enroll { user, audio, purpose, stage, todo, .. }) = self.flows.get_mut(&flow) else {
            return Err(SimError::Protocol(format!("no enrollment flow {flow}")));
        };
        *stage = EnrollStage::Enrolling;
        let (user, audio, purpose) = (user.clone(), audio.clone(), *purpose);
        let server = if double {
            let mut next = None;
            while let Some(v) = todo.pop_front() {
                if available.contains(&v) {
                    next = Some(v);
                    break;
                }
            }
            match next {
                Some(v) => Some(self.dispatch_to_version(ctx, &v, &user)?),
                None => None,
            }
        } else if let Some(Flow::Enroll { produced, .. }) = self.flows.get(&flow) {
            if !produced.is_empty() {
                None
            } else {
                Some(self.pick_single_enroll_server(ctx, &user, route.unwrap_or(Route::Any))?)
            }
        } else {
            None
        };
        match server {
            Some(server) => {
                ctx.out.send(
                    NodeId::Cloud(server),
                    Msg::CloudEnroll { flow, user, audio, purpose },
                );
                Ok(())
            }
            None => self.enroll_engine_done(ctx, flow),
        }
    }

    fn pick_single_enroll_server(&mut self, ctx: &mut NodeCtx<'_>, user: &str, route: Route) -> Result<ServerId, SimError> {
        let server = match route {
            Route::Pinned(s) => s,
            Route::Target(v) => {
                let pool = self.node.servers().to_vec();
                let table = self.fleet_table();
                match self
                    .node
                    .dispatch_in(&pool, user, &VersionRequirement::Exactly(v), Some(&table), ctx.rng)
                {
                    Ok(s) => s,
                    Err(TopologyError::NoEligibleServer) => self.node.dispatch(user, &VersionRequirement::Any, ctx.rng)?,
                    Err(e) => return Err(e.into()),
                }
            }
            Route::Any => {
                let requirement = match (self.strategy.mitigation, self.node.newest_in_table()) {
                    (Mitigation::SyncTable, Some(v)) => VersionRequirement::AtLeast(v.clone()),
                    _ => VersionRequirement::Any,
                };
                self.node.dispatch(user, &requirement, ctx.rng)?
            }
        };
        Ok(server)
    }

    fn on_enrolled(&mut self, ctx: &mut NodeCtx<'_>, flow: u64, profile: UserProfile) -> Result<(), SimError> {
        match self.flows.get_mut(&flow) {
            Some(Flow::Enroll { produced, .. }) => {
                produced.push(profile);
                self.enroll_next(ctx, flow, None)
            }
            Some(Flow::Upgrade { .. }) => {
                ctx.out.send(
                    NodeId::Database,
                    Msg::DbPutProfiles {
                        flow,
                        profiles: vec![profile],
                        retain: Retention::Keep(2),
                    },
                );
                Ok(())
            }
            _ => Err(SimError::Protocol(format!("enrollment result for unknown flow {flow}"))),
        }
    }

    fn enroll_engine_done(&mut self, ctx: &mut NodeCtx<'_>, flow: u64) -> Result<(), SimError> {
        let retain = self.retention();
        let hybrid = self.strategy.deployment == Deployment::Hybrid;
        let Some(Flow::Enroll { device, req, stage, produced, .. }) = self.flows.get_mut(&flow) else {
            unreachable!()
        };
        if produced.is_empty() {
            return Err(TopologyError::NoEligibleServer.into());
        }
        if hybrid {
            let (device, req, produced) = (*device, *req, std::mem::take(produced));
            self.flows.remove(&flow);
            Self::reply_enroll(ctx, device, req, Outcome::Ok, produced);
            return Ok(());
        }
        *stage = EnrollStage::StoringProfiles;
        let profiles = produced.clone();
        ctx.out.send(
            NodeId::Database,
            Msg::DbPutProfiles { flow, profiles, retain },
        );
        Ok(())
    }

    // ---- runtime -----------------------------------------------------------

    fn reply_runtime(ctx: &mut NodeCtx<'_>, device: usize, req: u64, response: RuntimeResponse, reenrolled: u32) {
        ctx.out.send(
            NodeId::Device(device),
            Msg::RuntimeResp { req, response, reenrolled },
        );
    }

    fn on_runtime_req(
        &mut self,
        ctx: &mut NodeCtx<'_>,
        device: usize,
        req: u64,
        request: RuntimeRequest,
        pin: Option<ServerId>,
    ) -> Result<(), SimError> {
        if request.candidates.is_empty() {
            return Err(crate::engine::EngineError::NoCandidates.into());
        }
        if self.strategy.deployment == Deployment::Hybrid {
            return self.hybrid_handle_runtime(ctx, device, req, request, pin);
        }
        if self.node.maintenance {
            Self::reply_runtime(ctx, device, req, RuntimeResponse::refused(Outcome::Maintenance), 0);
            return Ok(());
        }
        self.inflight += 1;
        let users = request.candidates.user_ids();
        let flow = self.flow_id(Flow::Runtime {
            device,
            req,
            request,
            stage: RuntimeStage::Fetching,
            results: BTreeMap::new(),
            reenrolled: 0,
        });
        ctx.out.send(NodeId::Database, Msg::DbFetch { flow, users: Some(users) });
        Ok(())
    }

    pub fn hybrid_handle_runtime(
        &mut self,
        ctx: &mut NodeCtx<'_>,
        device: usize,
        req: u64,
        request: RuntimeRequest,
        pin: Option<ServerId>,
    ) -> Result<(), SimError> {
        let Candidates::Profiles(carried) = &request.candidates else {
            return Err(SimError::Protocol("hybrid runtime request without profiles".into()));
        };
        let key = carried.keys().next().cloned().unwrap_or_default();
        let (server, rows, on_mismatch) = if self.strategy.is_double() {
            let held: Vec<Vec<VersionId>> = carried
                .values()
                .map(|ps| ps.iter().map(|p| p.version.clone()).collect())
                .collect();
            let Some(v) = choose_common_version(&held, &self.available_versions()) else {
                Self::reply_runtime(ctx, device, req, RuntimeResponse::refused(Outcome::StaleProfiles), 0);
                return Ok(());
            };
            let rows = carried
                .iter()
                .map(|(u, ps)| CandidateRow {
                    user: u.clone(),
                    profiles: ps.iter().filter(|p| p.version == v).cloned().collect(),
                    audio: Vec::new(),
                })
                .collect();
            (self.dispatch_to_version(ctx, &v, &key)?, rows, OnMismatch::Strict)
        } else {
            let server = match pin {
                Some(s) => s,
                None => self.node.dispatch(&key, &VersionRequirement::Any, ctx.rng)?,
            };
            let rows = carried
                .iter()
                .map(|(u, ps)| CandidateRow {
                    user: u.clone(),
                    profiles: ps.clone(),
                    audio: Vec::new(),
                })
                .collect();
            (server, rows, OnMismatch::Retry)
        };
        let audio = request.runtime_audio.clone();
        let flow = self.flow_id(Flow::Runtime {
            device,
            req,
            request,
            stage: RuntimeStage::Recognizing,
            results: BTreeMap::new(),
            reenrolled: 0,
        });
        ctx.out.send(
            NodeId::Cloud(server),
            Msg::CloudRuntime {
                flow,
                audio,
                candidates: rows,
                on_mismatch,
            },
        );
        Ok(())
    }

    fn candidate_rows(rows: Vec<(UserId, Option<ProfileRow>)>) -> Result<Vec<CandidateRow>, SimError> {
        rows.into_iter()
            .map(|(user, row)| match row {
                Some(row) => Ok(CandidateRow {
                    user,
                    profiles: row.profiles,
                    audio: row.enrollment_audio,
                }),
                None => Err(TopologyError::UnknownUser(user).into()),
            })
            .collect()
    }

    pub fn online_handle_runtime(
        &mut self,
        ctx: &mut NodeCtx<'_>,
        flow: u64,
        audio: AudioSample,
        rows: Vec<CandidateRow>,
    ) -> Result<(), SimError> {
        let requirement = match self.strategy.mitigation {
            Mitigation::SyncTable => rows
                .iter()
                .filter_map(|r| r.profiles.last())
                .map(|p| p.version.clone())
                .max()
                .map_or(VersionRequirement::Any, VersionRequirement::AtLeast),
            _ => VersionRequirement::Any,
        };
        let key = rows[0].user.clone();
        let server = self.node.dispatch(&key, &requirement, ctx.rng)?;
        ctx.out.send(
            NodeId::Cloud(server),
            Msg::CloudRuntime {
                flow,
                audio,
                candidates: rows,
                on_mismatch: OnMismatch::Reenroll,
            },
        );
        Ok(())
    }

    pub fn double_handle_runtime(
        &mut self,
        ctx: &mut NodeCtx<'_>,
        flow: u64,
        audio: AudioSample,
        rows: Vec<CandidateRow>,
    ) -> Result<(), SimError> {
        let available = self.available_versions();
        let held: Vec<Vec<VersionId>> = rows
            .iter()
            .map(|r| r.profiles.iter().map(|p| p.version.clone()).collect())
            .collect();
        let Some(v) = choose_common_version(&held, &available) else {
            return Err(SimError::NoCommonVersion {
                users: rows.into_iter().map(|r| r.user).collect(),
            });
        };
        let key = rows[0].user.clone();
        let server = self.dispatch_to_version(ctx, &v, &key)?;
        let newest = available.last().cloned().expect("a served version");
        let mut pinned = Vec::with_capacity(rows.len());
        let mut lagging = Vec::new();
        for r in rows {
            if !r.profiles.iter().any(|p| p.version == newest) {
                lagging.push((r.user.clone(), r.audio.clone()));
            }
            pinned.push(CandidateRow {
                profiles: r.profiles.into_iter().filter(|p| p.version == v).collect(),
                ..r
            });
        }
        ctx.out.send(
            NodeId::Cloud(server),
            Msg::CloudRuntime {
                flow,
                audio,
                candidates: pinned,
                on_mismatch: OnMismatch::Strict,
            },
        );
        for (user, audio) in lagging {
            self.spawn_upgrade(ctx, user, audio, &newest, false)?;
        }
        Ok(())
    }

    fn on_recognized(
        &mut self,
        ctx: &mut NodeCtx<'_>,
        flow: u64,
        new_results: BTreeMap<UserId, RecognitionResult>,
        new_profiles: Vec<UserProfile>,
        count: u32,
    ) -> Result<(), SimError> {
        let retain = self.retention();
        let Some(Flow::Runtime { device, req, stage, results, reenrolled, .. }) = self.flows.get_mut(&flow) else {
            return Err(SimError::Protocol(format!("recognition for unknown flow {flow}")));
        };
        *results = new_results;
        *reenrolled = count;
        if !new_profiles.is_empty() {
            *stage = RuntimeStage::WritingBack;
            ctx.out.send(
                NodeId::Database,
                Msg::DbPutProfiles {
                    flow,
                    profiles: new_profiles,
                    retain,
                },
            );
            return Ok(());
        }
        let (device, req, results, count) = (*device, *req, std::mem::take(results), *reenrolled);
        self.complete_runtime(ctx, flow, device, req, results, count);
        Ok(())
    }

    fn complete_runtime(
        &mut self,
        ctx: &mut NodeCtx<'_>,
        flow: u64,
        device: usize,
        req: u64,
        results: BTreeMap<UserId, RecognitionResult>,
        reenrolled: u32,
    ) {
        self.flows.remove(&flow);
        Self::reply_runtime(ctx, device, req, RuntimeResponse::ok(results), reenrolled);
        if self.strategy.deployment != Deployment::Hybrid {
            self.inflight -= 1;
            self.maybe_begin_offline_update(ctx);
        }
    }

    // ---- database replies --------------------------------------------------

    fn on_db_rows(&mut self, ctx: &mut NodeCtx<'_>, flow: u64, rows: Vec<(UserId, Option<ProfileRow>)>) -> Result<(), SimError> {
        match self.flows.get_mut(&flow) {
            Some(Flow::Runtime { request, stage, .. }) => {
                *stage = RuntimeStage::Recognizing;
                let audio = request.runtime_audio.clone();
                let rows = Self::candidate_rows(rows)?;
                match self.strategy.policy {
                    Policy::SingleOffline => {
                        let server = self.node.dispatch(&rows[0].user, &VersionRequirement::Any, ctx.rng)?;
                        ctx.out.send(
                            NodeId::Cloud(server),
                            Msg::CloudRuntime {
                                flow,
                                audio,
                                candidates: rows,
                                on_mismatch: OnMismatch::Strict,
                            },
                        );
                        Ok(())
                    }
                    Policy::SingleOnline => self.online_handle_runtime(ctx, flow, audio, rows),
                    Policy::Double => self.double_handle_runtime(ctx, flow, audio, rows),
                }
            }
            Some(Flow::Bulk { pending, .. }) => {
                let p = self.reenroll_parallelism.min(self.node.servers().len());
                let mut chunks: Vec<Vec<(UserId, Vec<AudioSample>)>> = vec![Vec::new(); p];
                for (i, (user, row)) in rows.into_iter().enumerate() {
                    let row = row.ok_or_else(|| TopologyError::UnknownUser(user.clone()))?;
                    chunks[i % p].push((user, row.enrollment_audio));
                }
                let servers = self.node.servers().to_vec();
                let mut sent = 0;
                for (j, chunk) in chunks.into_iter().enumerate() {
                    if !chunk.is_empty() {
                        ctx.out.send(
                            NodeId::Cloud(servers[j]),
                            Msg::CloudBulkReenroll { flow, rows: chunk },
                        );
                        sent += 1;
                    }
                }
                *pending = sent;
                if sent == 0 {
                    self.flows.remove(&flow);
                    self.end_maintenance(ctx)?;
                }
                Ok(())
            }
            Some(Flow::SweepFetch) => {
                self.flows.remove(&flow);
                let target = self.available_versions().last().cloned().expect("a served version");
                self.sweep = rows
                    .into_iter()
                    .filter_map(|(u, row)| row.map(|r| (u, r)))
                    .filter(|(_, r)| r.at_version(&target).is_none())
                    .map(|(u, r)| (u, r.enrollment_audio))
                    .collect();
                self.sweep_next(ctx)
            }
            _ => Err(SimError::Protocol(format!("rows for unknown flow {flow}"))),
        }
    }

    fn on_bulk_done(&mut self, ctx: &mut NodeCtx<'_>, flow: u64, mut done: Vec<UserProfile>) -> Result<(), SimError> {
        let Some(Flow::Bulk { pending, profiles }) = self.flows.get_mut(&flow) else {
            return Err(SimError::Protocol(format!("bulk result for unknown flow {flow}")));
        };
        profiles.append(&mut done);
        *pending -= 1;
        if *pending == 0 {
            let mut profiles = std::mem::take(profiles);
            profiles.sort_by(|a, b| a.user_id.cmp(&b.user_id));
            ctx.out.send(
                NodeId::Database,
                Msg::DbPutProfiles {
                    flow,
                    profiles,
                    retain: Retention::Keep(1),
                },
            );
        }
        Ok(())
    }

    fn end_maintenance(&mut self, ctx: &mut NodeCtx<'_>) -> Result<(), SimError> {
        self.node.maintenance = false;
        ctx.log.maintenance_ended(ctx.now);
        self.finish_rollout(ctx)
    }

    fn on_db_ack(&mut self, ctx: &mut NodeCtx<'_>, flow: u64) -> Result<(), SimError> {
        let Some(state) = self.flows.get(&flow).cloned() else {
            return Err(SimError::Protocol(format!("ack for unknown flow {flow}")));
        };
        match state {
            Flow::Enroll { stage: EnrollStage::StoringAudio, .. } => self.enroll_next(ctx, flow, Some(Route::Any)),
            Flow::Enroll { device, req, user, audio, produced, .. } => {
                self.flows.remove(&flow);
                Self::reply_enroll(ctx, device, req, Outcome::Ok, Vec::new());
                self.inflight -= 1;
                if self.strategy.is_double() {
                    if let Some(newest) = self.available_versions().last().cloned() {
                        if !produced.iter().any(|p| p.version == newest) {
                            self.spawn_upgrade(ctx, user, audio, &newest, false)?;
                        }
                    }
                }
                self.maybe_begin_offline_update(ctx);
                Ok(())
            }
            Flow::Runtime { device, req, results, reenrolled, .. } => {
                self.complete_runtime(ctx, flow, device, req, results, reenrolled);
                Ok(())
            }
            Flow::Bulk { .. } => {
                self.flows.remove(&flow);
                self.end_maintenance(ctx)
            }
            Flow::Upgrade { sweep, .. } => {
                self.flows.remove(&flow);
                self.upgrades_in_flight -= 1;
                if sweep {
                    self.sweep_active = false;
                }
                if self.sweeping() {
                    return self.sweep_next(ctx);
                }
                Ok(())
            }
            Flow::SweepFetch => Err(SimError::Protocol(format!("unexpected ack for flow {flow}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(seq: u64) -> VersionId {
        VersionId::new(format!("V{seq}"), seq)
    }

    #[test]
    fn common_version_is_the_maximum_of_the_intersection() {
        assert_eq!(
            choose_common_version(&[vec![v(2), v(3)], vec![v(2), v(3)]], &[v(2), v(3)]),
            Some(v(3))
        );
        assert_eq!(
            choose_common_version(&[vec![v(1), v(2)], vec![v(2), v(3)]], &[v(2), v(3)]),
            Some(v(2))
        );
        assert_eq!(choose_common_version(&[vec![v(2)]], &[v(2), v(3)]), Some(v(2)));
        assert_eq!(choose_common_version(&[vec![v(1), v(2)]], &[v(3), v(4)]), None);
    }

    #[test]
    fn double_groups_split_the_pool() {
        let fe = FrontendController::new(
            StrategyConfig::new(Deployment::Server, Policy::Double, Mitigation::None),
            5,
            &[v(1), v(2)],
            Vec::new(),
            1,
        );
        assert_eq!(fe.groups[0].servers, vec![ServerId(0), ServerId(1)]);
        assert_eq!(fe.groups[1].servers, vec![ServerId(2), ServerId(3), ServerId(4)]);
        assert_eq!(fe.available_versions(), vec![v(1), v(2)]);
    }

    #[test]
    fn sync_table_starts_from_the_initial_fleet() {
        let fe = FrontendController::new(
            StrategyConfig::new(Deployment::Server, Policy::SingleOnline, Mitigation::SyncTable),
            2,
            &[v(1)],
            Vec::new(),
            1,
        );
        assert_eq!(fe.node().newest_in_table(), Some(&v(1)));
        let plain = FrontendController::new(StrategyConfig::default(), 2, &[v(1)], Vec::new(), 1);
        assert!(plain.node().version_table.is_none());
    }
}
