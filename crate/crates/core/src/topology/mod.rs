//! State held by each node kind: user devices, the frontend reverse proxy,
//! cloud computing servers, the profile database and model storage.
//!
//! The types here carry state and the pure operations on it. Message
//! handling and strategy logic live in [`crate::strategies`] and
//! [`crate::world`].

mod cloud;
mod database;
mod device;
mod frontend;
mod storage;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cloud::CloudServerNode;
pub use database::{DatabaseNode, ProfileRow, Retention};
pub use device::{DeviceNode, ReenrollPlan};
pub use frontend::{frontend_dispatch, DispatchPolicy, FrontendNode, VersionRequirement, VersionTable};
pub use storage::{ModelRelease, ModelStorageNode};

use crate::domain::UserId;

/// Index of a cloud computing server in the frontend's fixed server list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServerId(pub usize);

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cloud-{}", self.0)
    }
}

/// Event target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Storage,
    Frontend,
    Database,
    Cloud(ServerId),
    Device(usize),
}

impl NodeId {
    /// Index used to derive the node's random stream.
    pub fn stream_index(self, cloud_servers: usize) -> u64 {
        match self {
            NodeId::Storage => 0,
            NodeId::Frontend => 1,
            NodeId::Database => 2,
            NodeId::Cloud(s) => 3 + s.0 as u64,
            NodeId::Device(d) => 3 + cloud_servers as u64 + d as u64,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Storage => f.write_str("storage"),
            NodeId::Frontend => f.write_str("frontend"),
            NodeId::Database => f.write_str("db"),
            NodeId::Cloud(s) => s.fmt(f),
            NodeId::Device(d) => write!(f, "device-{d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("no server is eligible for the requested version")]
    NoEligibleServer,
    #[error("no cloud servers registered")]
    NoServers,
    #[error("database has no row for user {0}")]
    UnknownUser(UserId),
    #[error("device has no stored enrollment audio for user {0}")]
    NoStoredAudio(UserId),
}
