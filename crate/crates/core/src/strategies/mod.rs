//! The version-control strategies.
//!
//! | deployment | policy          | behaviour |
//! |------------|-----------------|-----------|
//! | DEVICE     | SINGLE_ONLINE   | download latest model, then re-enroll every owner from stored audio |
//! | SERVER     | SINGLE_OFFLINE  | maintenance window, update all servers, bulk re-enroll |
//! | SERVER     | SINGLE_ONLINE   | re-enroll on the request path when versions differ |
//! | SERVER     | DOUBLE          | two fixed server groups, two stored profiles, background sweep |
//! | HYBRID     | SINGLE_ONLINE   | device re-enrolls when told to retry, optional handshake |
//! | HYBRID     | DOUBLE          | two served versions, two profiles on the device, optional handshake |
//!
//! SERVER + SINGLE_ONLINE additionally takes one of the bounce mitigations.
//! The controllers are implemented as event handlers on [`crate::world::World`].

mod device;
mod frontend;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use frontend::{choose_common_version, FrontendController};
pub use device::DeviceAgent;

use crate::domain::{UserId, VersionId};
use crate::kernel::SimTime;
use crate::topology::DispatchPolicy;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Deployment {
    Device,
    #[default]
    Server,
    Hybrid,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Policy {
    SingleOffline,
    #[default]
    SingleOnline,
    Double,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mitigation {
    #[default]
    None,
    SyncTable,
    HashLb,
    MultiProfile,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {constraint}")]
pub struct ConfigError {
    pub field: &'static str,
    pub constraint: String,
}

fn config_error(field: &'static str, constraint: impl Into<String>) -> ConfigError {
    ConfigError {
        field,
        constraint: constraint.into(),
    }
}

fn default_sync_period() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    #[serde(default)]
    pub deployment: Deployment,
    /// Base dispatch policy; HASH_LB forces HASH_BY_USER.
    #[serde(default)]
    pub dispatch: DispatchPolicy,
    #[serde(default)]
    pub handshake_period_ms: Option<u64>,
    #[serde(default)]
    pub mitigation: Mitigation,
    #[serde(default)]
    pub policy: Policy,
    /// Version-table refresh period for SYNC_TABLE.
    #[serde(default = "default_sync_period")]
    pub sync_period_ms: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            deployment: Deployment::default(),
            dispatch: DispatchPolicy::default(),
            handshake_period_ms: None,
            mitigation: Mitigation::default(),
            policy: Policy::default(),
            sync_period_ms: default_sync_period(),
        }
    }
}

impl StrategyConfig {
    pub fn new(deployment: Deployment, policy: Policy, mitigation: Mitigation) -> Self {
        Self {
            deployment,
            policy,
            mitigation,
            ..Self::default()
        }
    }

    pub fn with_dispatch(mut self, dispatch: DispatchPolicy) -> Self {
        self.dispatch = dispatch;
        self
    }

    pub fn with_handshake(mut self, period_ms: u64) -> Self {
        self.handshake_period_ms = Some(period_ms);
        self
    }

    pub fn effective_dispatch(&self) -> DispatchPolicy {
        match self.mitigation {
            Mitigation::HashLb => DispatchPolicy::HashByUser,
            _ => self.dispatch,
        }
    }

    pub fn is_double(&self) -> bool {
        self.policy == Policy::Double
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        use Deployment::*;
        use Policy::*;
        match (self.deployment, self.policy) {
            (Device, SingleOnline) | (Server, _) | (Hybrid, SingleOnline) | (Hybrid, Double) => {}
            (Device, p) => {
                return Err(config_error(
                    "strategy.policy",
                    format!("DEVICE deployment supports only SINGLE_ONLINE, got {p:?}"),
                ))
            }
            (Hybrid, SingleOffline) => {
                return Err(config_error(
                    "strategy.policy",
                    "HYBRID deployment supports SINGLE_ONLINE or DOUBLE",
                ))
            }
        }
        if self.mitigation != Mitigation::None
            && (self.deployment != Server || self.policy != SingleOnline)
        {
            return Err(config_error(
                "strategy.mitigation",
                "mitigations apply only to SERVER + SINGLE_ONLINE",
            ));
        }
        match self.handshake_period_ms {
            Some(_) if self.deployment != Hybrid => {
                return Err(config_error(
                    "strategy.handshake_period_ms",
                    "handshakes apply only to HYBRID deployment",
                ))
            }
            Some(0) => {
                return Err(config_error("strategy.handshake_period_ms", "must be positive"))
            }
            _ => {}
        }
        if self.sync_period_ms == 0 {
            return Err(config_error("strategy.sync_period_ms", "must be positive"));
        }
        Ok(())
    }

    /// Every valid (deployment, policy, mitigation) combination.
    pub fn all_combinations() -> Vec<StrategyConfig> {
        use Deployment::*;
        use Mitigation as M;
        use Policy::*;
        vec![
            Self::new(Device, SingleOnline, M::None),
            Self::new(Server, SingleOffline, M::None),
            Self::new(Server, SingleOnline, M::None),
            Self::new(Server, SingleOnline, M::SyncTable),
            Self::new(Server, SingleOnline, M::HashLb),
            Self::new(Server, SingleOnline, M::MultiProfile),
            Self::new(Server, Double, M::None),
            Self::new(Hybrid, SingleOnline, M::None),
            Self::new(Hybrid, Double, M::None),
        ]
    }
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn word<T: Serialize>(v: &T) -> String {
            serde_json::to_value(v)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default()
        }
        write!(
            f,
            "{} {} {}",
            word(&self.deployment),
            word(&self.policy),
            word(&self.mitigation)
        )?;
        if let Some(p) = self.handshake_period_ms {
            write!(f, " handshake={p}ms")?;
        }
        Ok(())
    }
}

/// A profile write that moved a user to an older version than they had.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BounceEvent {
    pub user_id: UserId,
    pub from_version: VersionId,
    pub to_version: VersionId,
    pub at: SimTime,
}
