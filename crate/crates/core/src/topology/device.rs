use std::collections::BTreeMap;

use crate::domain::{AudioSample, UserId, UserProfile, VersionId};

/// A user device. Which fields are meaningful depends on the deployment:
/// device-side keeps a local model and profiles, hybrid keeps profiles
/// only, server-side keeps neither.
#[derive(Debug, Clone)]
pub struct DeviceNode {
    pub device_id: usize,
    pub owner_users: Vec<UserId>,
    pub stored_audio: BTreeMap<UserId, Vec<AudioSample>>,
    pub stored_profiles: BTreeMap<UserId, Vec<UserProfile>>,
    pub local_model: Option<VersionId>,
    pub handshake_period_ms: Option<u64>,
}

/// Work list for re-enrolling every owner under a new local model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReenrollPlan {
    /// Owners with stored audio, in `owner_users` order.
    pub users: Vec<(UserId, Vec<AudioSample>)>,
    /// Owners without stored audio; their profiles are dropped.
    pub missing_audio: Vec<UserId>,
}

impl DeviceNode {
    pub fn new(device_id: usize, owner_users: Vec<UserId>) -> Self {
        Self {
            device_id,
            owner_users,
            stored_audio: BTreeMap::new(),
            stored_profiles: BTreeMap::new(),
            local_model: None,
            handshake_period_ms: None,
        }
    }

    /// Whether `latest` should be downloaded. Equal or older models are a no-op.
    pub fn needs_download(&self, latest: &VersionId) -> bool {
        self.local_model
            .as_ref()
            .is_none_or(|local| latest.is_newer_than(local))
    }

    pub fn plan_reenrollment(&self) -> ReenrollPlan {
        let mut plan = ReenrollPlan::default();
        for user in &self.owner_users {
            match self.stored_audio.get(user) {
                Some(audio) if !audio.is_empty() => plan.users.push((user.clone(), audio.clone())),
                _ => plan.missing_audio.push(user.clone()),
            }
        }
        plan
    }

    /// Replaces everything stored for `user`.
    pub fn store_profiles(&mut self, user: &str, mut profiles: Vec<UserProfile>) {
        profiles.sort_by(|a, b| a.version.cmp(&b.version));
        profiles.dedup_by(|a, b| a.version == b.version);
        self.stored_profiles.insert(user.to_owned(), profiles);
    }

    pub fn drop_profiles(&mut self, user: &str) {
        self.stored_profiles.remove(user);
    }

    pub fn newest_profile(&self, user: &str) -> Option<&UserProfile> {
        self.stored_profiles.get(user).and_then(|ps| ps.last())
    }

    pub fn has_profile(&self, user: &str) -> bool {
        self.stored_profiles.get(user).is_some_and(|ps| !ps.is_empty())
    }

    /// Device-side invariant: every stored profile matches the local model.
    pub fn profiles_match_local_model(&self) -> bool {
        let Some(model) = &self.local_model else {
            return self.stored_profiles.values().all(|ps| ps.is_empty());
        };
        self.stored_profiles
            .values()
            .flatten()
            .all(|p| &p.version == model)
    }
}
