use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ServerId, TopologyError};
use crate::domain::VersionId;
use crate::engine::fnv1a64;
use crate::kernel::SimRng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DispatchPolicy {
    #[default]
    RoundRobin,
    Random,
    HashByUser,
}

/// Last known served versions per cloud server.
pub type VersionTable = BTreeMap<ServerId, BTreeSet<VersionId>>;

/// Constraint on the model a request may be dispatched to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VersionRequirement {
    Any,
    /// Some served version has seq at or above this one.
    AtLeast(VersionId),
    /// The server serves exactly this version.
    Exactly(VersionId),
}

impl VersionRequirement {
    fn admits(&self, served: &BTreeSet<VersionId>) -> bool {
        match self {
            VersionRequirement::Any => true,
            VersionRequirement::AtLeast(v) => served.iter().any(|s| s.seq >= v.seq),
            VersionRequirement::Exactly(v) => served.contains(v),
        }
    }
}

/// Picks a server from `pool`.
///
/// The requirement only filters when a `table` is supplied. Round-robin
/// cycles the eligible servers in pool order; random draws from `rng`;
/// hashing maps `key_user` to `eligible[fnv1a64(key_user) mod N]`.
pub fn frontend_dispatch(
    pool: &[ServerId],
    policy: DispatchPolicy,
    key_user: &str,
    requirement: &VersionRequirement,
    table: Option<&VersionTable>,
    rr_cursor: &mut usize,
    rng: &mut SimRng,
) -> Result<ServerId, TopologyError> {
    if pool.is_empty() {
        return Err(TopologyError::NoServers);
    }
    let eligible: Vec<ServerId> = match table {
        Some(table) if *requirement != VersionRequirement::Any => pool
            .iter()
            .copied()
            .filter(|s| table.get(s).is_some_and(|served| requirement.admits(served)))
            .collect(),
        _ => pool.to_vec(),
    };
    if eligible.is_empty() {
        return Err(TopologyError::NoEligibleServer);
    }
    let n = eligible.len();
    let pick = match policy {
        DispatchPolicy::RoundRobin => {
            let i = *rr_cursor % n;
            *rr_cursor = rr_cursor.wrapping_add(1);
            i
        }
        DispatchPolicy::Random => (rng.next_u64() % n as u64) as usize,
        DispatchPolicy::HashByUser => (fnv1a64(key_user.as_bytes()) % n as u64) as usize,
    };
    Ok(eligible[pick])
}

/// Reverse proxy between user devices and the backend.
#[derive(Debug, Clone)]
pub struct FrontendNode {
    pub dispatch_policy: DispatchPolicy,
    /// Present only when the sync-table mitigation is enabled.
    pub version_table: Option<VersionTable>,
    pub maintenance: bool,
    servers: Vec<ServerId>,
    rr_cursor: usize,
}

impl FrontendNode {
    pub fn new(dispatch_policy: DispatchPolicy, servers: Vec<ServerId>, version_table: Option<VersionTable>) -> Self {
        Self {
            dispatch_policy,
            version_table,
            maintenance: false,
            servers,
            rr_cursor: 0,
        }
    }

    pub fn servers(&self) -> &[ServerId] {
        &self.servers
    }

    /// Dispatch over the full server list, filtered by the version table when enabled.
    pub fn dispatch(
        &mut self,
        key_user: &str,
        requirement: &VersionRequirement,
        rng: &mut SimRng,
    ) -> Result<ServerId, TopologyError> {
        frontend_dispatch(
            &self.servers,
            self.dispatch_policy,
            key_user,
            requirement,
            self.version_table.as_ref(),
            &mut self.rr_cursor,
            rng,
        )
    }

    /// Dispatch over a caller-chosen pool, using `table` for filtering.
    pub fn dispatch_in(
        &mut self,
        pool: &[ServerId],
        key_user: &str,
        requirement: &VersionRequirement,
        table: Option<&VersionTable>,
        rng: &mut SimRng,
    ) -> Result<ServerId, TopologyError> {
        frontend_dispatch(
            pool,
            self.dispatch_policy,
            key_user,
            requirement,
            table,
            &mut self.rr_cursor,
            rng,
        )
    }

    /// Newest version recorded anywhere in the table.
    pub fn newest_in_table(&self) -> Option<&VersionId> {
        self.version_table
            .as_ref()?
            .values()
            .flat_map(|set| set.iter())
            .max()
    }

    /// Overwrites one server's entry when the sync table is enabled.
    pub fn record_sync(&mut self, server: ServerId, served: BTreeSet<VersionId>) {
        if let Some(table) = self.version_table.as_mut() {
            table.insert(server, served);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(id: &str, seq: u64) -> VersionId {
        VersionId::new(id, seq)
    }

    fn servers(n: usize) -> Vec<ServerId> {
        (0..n).map(ServerId).collect()
    }

    fn table(entries: &[(usize, VersionId)]) -> VersionTable {
        entries
            .iter()
            .map(|(s, v)| (ServerId(*s), BTreeSet::from([v.clone()])))
            .collect()
    }

    #[test]
    fn hash_dispatch_is_sticky() {
        let mut fe = FrontendNode::new(DispatchPolicy::HashByUser, servers(3), None);
        let mut rng = SimRng::new(1);
        let first = fe.dispatch("u1", &VersionRequirement::Any, &mut rng).unwrap();
        for _ in 0..50 {
            assert_eq!(fe.dispatch("u1", &VersionRequirement::Any, &mut rng).unwrap(), first);
        }
        // fnv1a64("u1") mod 3 == 2, computed independently.
        assert_eq!(first, ServerId(2));
    }

    #[test]
    fn round_robin_cycles_in_order() {
        let mut fe = FrontendNode::new(DispatchPolicy::RoundRobin, servers(3), None);
        let mut rng = SimRng::new(1);
        let picks: Vec<usize> = (0..6)
            .map(|_| fe.dispatch("u1", &VersionRequirement::Any, &mut rng).unwrap().0)
            .collect();
        assert_eq!(picks, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn random_dispatch_follows_stream() {
        let mut fe = FrontendNode::new(DispatchPolicy::Random, servers(2), None);
        let mut rng = SimRng::new(0);
        let mut oracle = SimRng::new(0);
        for _ in 0..20 {
            let expected = (oracle.next_u64() % 2) as usize;
            assert_eq!(fe.dispatch("u1", &VersionRequirement::Any, &mut rng).unwrap().0, expected);
        }
    }

    #[test]
    fn table_filters_exact_version() {
        let t = table(&[(0, v("V2", 2)), (1, v("V3", 3))]);
        let mut fe = FrontendNode::new(DispatchPolicy::RoundRobin, servers(2), Some(t));
        let mut rng = SimRng::new(1);
        for _ in 0..4 {
            assert_eq!(
                fe.dispatch("u1", &VersionRequirement::Exactly(v("V3", 3)), &mut rng),
                Ok(ServerId(1))
            );
        }
    }

    #[test]
    fn table_without_required_version_has_no_eligible_server() {
        let t = table(&[(0, v("V2", 2)), (1, v("V2", 2))]);
        let mut fe = FrontendNode::new(DispatchPolicy::RoundRobin, servers(2), Some(t));
        let mut rng = SimRng::new(1);
        assert_eq!(
            fe.dispatch("u1", &VersionRequirement::Exactly(v("V3", 3)), &mut rng),
            Err(TopologyError::NoEligibleServer)
        );
        assert_eq!(
            fe.dispatch("u1", &VersionRequirement::AtLeast(v("V3", 3)), &mut rng),
            Err(TopologyError::NoEligibleServer)
        );
    }

    #[test]
    fn at_least_admits_newer_servers() {
        let t = table(&[(0, v("V1", 1)), (1, v("V2", 2)), (2, v("V3", 3))]);
        let mut fe = FrontendNode::new(DispatchPolicy::RoundRobin, servers(3), Some(t));
        let mut rng = SimRng::new(1);
        let picks: Vec<usize> = (0..4)
            .map(|_| {
                fe.dispatch("u1", &VersionRequirement::AtLeast(v("V2", 2)), &mut rng)
                    .unwrap()
                    .0
            })
            .collect();
        assert_eq!(picks, vec![1, 2, 1, 2]);
    }

    #[test]
    fn requirement_ignored_without_table() {
        let mut fe = FrontendNode::new(DispatchPolicy::RoundRobin, servers(2), None);
        let mut rng = SimRng::new(1);
        assert!(fe.dispatch("u1", &VersionRequirement::Exactly(v("V9", 9)), &mut rng).is_ok());
    }

    #[test]
    fn newest_in_table() {
        let t = table(&[(0, v("V1", 1)), (1, v("V3", 3))]);
        let fe = FrontendNode::new(DispatchPolicy::RoundRobin, servers(2), Some(t));
        assert_eq!(fe.newest_in_table(), Some(&v("V3", 3)));
    }

    #[test]
    fn empty_pool() {
        let mut cursor = 0;
        let mut rng = SimRng::new(0);
        assert_eq!(
            frontend_dispatch(&[], DispatchPolicy::Random, "u1", &VersionRequirement::Any, None, &mut cursor, &mut rng),
            Err(TopologyError::NoServers)
        );
    }
}
