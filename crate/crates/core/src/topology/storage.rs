use serde::{Deserialize, Serialize};

use crate::domain::VersionId;
use crate::kernel::SimTime;

/// A published model together with its rollout parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRelease {
    pub version: VersionId,
    pub release_time: SimTime,
    /// Device-side download duration.
    pub download_ms: u64,
    /// Inclusive range each cloud server draws its update duration from.
    pub server_update_ms_range: (u64, u64),
}

/// Holds every historical model and the "latest" pointer devices download from.
#[derive(Debug, Clone)]
pub struct ModelStorageNode {
    releases: Vec<ModelRelease>,
    published: usize,
}

impl ModelStorageNode {
    /// `releases` must be ordered by seq. The first `initially_published`
    /// entries are available from the start.
    pub fn new(releases: Vec<ModelRelease>, initially_published: usize) -> Self {
        assert!(initially_published >= 1 && initially_published <= releases.len());
        Self {
            releases,
            published: initially_published,
        }
    }

    pub fn releases(&self) -> &[ModelRelease] {
        &self.releases
    }

    pub fn release(&self, index: usize) -> &ModelRelease {
        &self.releases[index]
    }

    /// Makes release `index` (and everything before it) downloadable.
    pub fn publish(&mut self, index: usize) {
        self.published = self.published.max(index + 1).min(self.releases.len());
    }

    pub fn latest(&self) -> &VersionId {
        &self.releases[self.published - 1].version
    }

    pub fn latest_release(&self) -> &ModelRelease {
        &self.releases[self.published - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(seq: u64, t: u64) -> ModelRelease {
        ModelRelease {
            version: VersionId::new(format!("V{seq}"), seq),
            release_time: SimTime(t),
            download_ms: 100,
            server_update_ms_range: (10, 20),
        }
    }

    #[test]
    fn latest_tracks_max_published_release() {
        let mut s = ModelStorageNode::new(vec![rel(1, 0), rel(2, 100), rel(3, 200)], 1);
        assert_eq!(s.latest().seq, 1);
        s.publish(1);
        assert_eq!(s.latest().seq, 2);
        s.publish(0);
        assert_eq!(s.latest().seq, 2);
        s.publish(2);
        assert_eq!(s.latest().seq, 3);
        assert_eq!(s.latest_release().release_time, SimTime(200));
    }
}
