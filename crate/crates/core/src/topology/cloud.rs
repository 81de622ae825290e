use std::collections::BTreeSet;

use super::ServerId;
use crate::domain::VersionId;
use crate::engine::EngineInstance;
use crate::kernel::SimTime;

/// One cloud computing server running a single speech engine.
///
/// While an update is pending the server keeps serving the old model; the
/// new model takes over exactly at `updating_until`.
#[derive(Debug, Clone)]
pub struct CloudServerNode {
    pub server_id: ServerId,
    engine: EngineInstance,
    pending: Option<(SimTime, VersionId)>,
}

impl CloudServerNode {
    pub fn new(server_id: ServerId, engine: EngineInstance) -> Self {
        Self {
            server_id,
            engine,
            pending: None,
        }
    }

    pub fn engine(&self) -> &EngineInstance {
        &self.engine
    }

    pub fn model(&self) -> &VersionId {
        self.engine.model()
    }

    pub fn updating_until(&self) -> Option<SimTime> {
        self.pending.as_ref().map(|(t, _)| *t)
    }

    /// Served versions as reported to a sync request.
    pub fn served_versions(&self) -> BTreeSet<VersionId> {
        BTreeSet::from([self.model().clone()])
    }

    /// Starts an update that completes at `until`. A newer pending target
    /// replaces an older one; an older target is ignored.
    pub fn begin_update(&mut self, target: VersionId, until: SimTime) -> bool {
        if !target.is_newer_than(self.model()) {
            return false;
        }
        if let Some((_, pending)) = &self.pending {
            if !target.is_newer_than(pending) {
                return false;
            }
        }
        self.pending = Some((until, target));
        true
    }

    /// Swaps in the pending model if its completion time has been reached.
    pub fn complete_update(&mut self, now: SimTime) -> Option<VersionId> {
        match &self.pending {
            Some((until, _)) if *until <= now => {
                let (_, target) = self.pending.take().expect("checked");
                self.engine = self.engine.with_model(target.clone());
                Some(target)
            }
            _ => None,
        }
    }
}
