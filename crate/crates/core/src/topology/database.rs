use std::collections::BTreeMap;

use super::TopologyError;
use crate::domain::{AudioSample, UserId, UserProfile, VersionId};

/// How many profile versions a row keeps after a write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retention {
    Keep(usize),
    All,
}

impl Retention {
    fn limit(self) -> usize {
        match self {
            Retention::Keep(n) => n.max(1),
            Retention::All => usize::MAX,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileRow {
    pub enrollment_audio: Vec<AudioSample>,
    /// Pairwise-distinct versions, ascending by seq.
    pub profiles: Vec<UserProfile>,
}

impl ProfileRow {
    pub fn newest(&self) -> Option<&UserProfile> {
        self.profiles.last()
    }

    pub fn at_version(&self, v: &VersionId) -> Option<&UserProfile> {
        self.profiles.iter().find(|p| &p.version == v)
    }

    pub fn versions(&self) -> Vec<VersionId> {
        self.profiles.iter().map(|p| p.version.clone()).collect()
    }
}

/// Backend store for enrollment audio and profiles, keyed by user.
#[derive(Debug, Clone, Default)]
pub struct DatabaseNode {
    rows: BTreeMap<UserId, ProfileRow>,
}

impl DatabaseNode {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates the row if needed and replaces its enrollment audio.
    pub fn put_audio(&mut self, user: &str, audio: Vec<AudioSample>) {
        self.rows.entry(user.to_owned()).or_default().enrollment_audio = audio;
    }

    /// Inserts or replaces the profile at `p.version`, then evicts the oldest
    /// profiles until at most `retain` remain. A single-slot row always holds
    /// the last write, even when that write is older than what it replaces.
    pub fn put_profile(&mut self, p: UserProfile, retain: Retention) -> Result<(), TopologyError> {
        let row = self
            .rows
            .get_mut(&p.user_id)
            .ok_or_else(|| TopologyError::UnknownUser(p.user_id.clone()))?;
        if retain.limit() == 1 {
            row.profiles = vec![p];
            return Ok(());
        }
        match row.profiles.iter_mut().find(|q| q.version == p.version) {
            Some(existing) => *existing = p,
            None => {
                row.profiles.push(p);
                row.profiles.sort_by(|a, b| a.version.cmp(&b.version));
            }
        }
        let excess = row.profiles.len().saturating_sub(retain.limit());
        row.profiles.drain(..excess);
        Ok(())
    }

    pub fn row(&self, user: &str) -> Option<&ProfileRow> {
        self.rows.get(user)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&UserId, &ProfileRow)> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
