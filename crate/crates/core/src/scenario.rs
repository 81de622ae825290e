//! Scenario files: JSON description of one simulated deployment.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::VersionId;
use crate::kernel::{LatencyModel, SimTime};
use crate::strategies::{Policy, StrategyConfig};
use crate::topology::ModelRelease;

/// Version the fleet runs before any release when no release is scheduled at time zero.
pub const BASE_VERSION_ID: &str = "V0";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("PARSE_ERROR at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("VALIDATION_ERROR: {field}: {constraint}")]
    Validation { field: String, constraint: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl ScenarioError {
    fn invalid(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        ScenarioError::Validation {
            field: field.into(),
            constraint: constraint.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkLatencies {
    #[serde(default = "defaults::device_frontend")]
    pub device_frontend: LatencyModel,
    #[serde(default = "defaults::frontend_cloud")]
    pub frontend_cloud: LatencyModel,
    #[serde(default = "defaults::frontend_db")]
    pub frontend_db: LatencyModel,
    #[serde(default = "defaults::device_storage")]
    pub device_storage: LatencyModel,
}

impl Default for LinkLatencies {
    fn default() -> Self {
        Self {
            device_frontend: defaults::device_frontend(),
            frontend_cloud: defaults::frontend_cloud(),
            frontend_db: defaults::frontend_db(),
            device_storage: defaults::device_storage(),
        }
    }
}

impl LinkLatencies {
    pub fn zero() -> Self {
        Self {
            device_frontend: LatencyModel::ZERO,
            frontend_cloud: LatencyModel::ZERO,
            frontend_db: LatencyModel::ZERO,
            device_storage: LatencyModel::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseSpec {
    pub time_ms: u64,
    pub version_id: String,
    #[serde(default = "defaults::download_ms")]
    pub download_ms: u64,
    /// Inclusive `[min, max]` per-server update duration.
    #[serde(default = "defaults::server_update_ms")]
    pub server_update_ms: [u64; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitArrival {
    pub time_ms: u64,
    pub user_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RuntimeArrivals {
    PoissonRatePerUserPerS(f64),
    Explicit(Vec<ExplicitArrival>),
}

impl Default for RuntimeArrivals {
    fn default() -> Self {
        RuntimeArrivals::PoissonRatePerUserPerS(0.2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default = "defaults::users")]
    pub users: usize,
    #[serde(default = "defaults::devices")]
    pub devices: usize,
    #[serde(default = "defaults::cloud_servers")]
    pub cloud_servers: usize,
    #[serde(default = "defaults::samples_per_user")]
    pub samples_per_user: usize,
    #[serde(default = "defaults::enroll_cost")]
    pub enroll_cost_ms_per_sample: u64,
    #[serde(default = "defaults::runtime_cost")]
    pub runtime_cost_ms: u64,
    #[serde(default)]
    pub latency: LinkLatencies,
    #[serde(default)]
    pub releases: Vec<ReleaseSpec>,
    #[serde(default)]
    pub runtime_arrivals: RuntimeArrivals,
    #[serde(default = "defaults::duration_ms")]
    pub duration_ms: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::reenroll_parallelism")]
    pub reenroll_parallelism: usize,
}

mod defaults {
    use crate::kernel::LatencyModel;

    pub fn device_frontend() -> LatencyModel {
        LatencyModel { base_ms: 20, jitter_ms: 10 }
    }
    pub fn frontend_cloud() -> LatencyModel {
        LatencyModel { base_ms: 2, jitter_ms: 1 }
    }
    pub fn frontend_db() -> LatencyModel {
        LatencyModel { base_ms: 1, jitter_ms: 1 }
    }
    pub fn device_storage() -> LatencyModel {
        LatencyModel { base_ms: 40, jitter_ms: 20 }
    }
    pub fn download_ms() -> u64 {
        500
    }
    pub fn server_update_ms() -> [u64; 2] {
        [100, 300]
    }
    pub fn users() -> usize {
        4
    }
    pub fn devices() -> usize {
        2
    }
    pub fn cloud_servers() -> usize {
        2
    }
    pub fn samples_per_user() -> usize {
        3
    }
    pub fn enroll_cost() -> u64 {
        10
    }
    pub fn runtime_cost() -> u64 {
        20
    }
    pub fn duration_ms() -> u64 {
        60_000
    }
    pub fn reenroll_parallelism() -> usize {
        1
    }
}

impl Default for Scenario {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

pub fn user_name(index: usize) -> String {
    format!("u{}", index + 1)
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("scenario serializes");
        let mut out = serde_json::to_string_pretty(&value).expect("value serializes");
        out.push('\n');
        out
    }

    pub fn user_ids(&self) -> Vec<String> {
        (0..self.users).map(user_name).collect()
    }

    /// Device owning user `index`.
    pub fn device_of(&self, index: usize) -> usize {
        index % self.devices
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.strategy
            .validate()
            .map_err(|e| ScenarioError::invalid(e.field, e.constraint))?;
        let positive = [
            ("users", self.users as u64),
            ("devices", self.devices as u64),
            ("cloud_servers", self.cloud_servers as u64),
            ("samples_per_user", self.samples_per_user as u64),
            ("enroll_cost_ms_per_sample", self.enroll_cost_ms_per_sample),
            ("runtime_cost_ms", self.runtime_cost_ms),
            ("duration_ms", self.duration_ms),
            ("reenroll_parallelism", self.reenroll_parallelism as u64),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(ScenarioError::invalid(field, "must be positive"));
            }
        }
        if self.devices > self.users {
            return Err(ScenarioError::invalid("devices", "must not exceed users (every device needs an owner)"));
        }
        if self.strategy.policy == Policy::Double && self.cloud_servers < 2 {
            return Err(ScenarioError::invalid("cloud_servers", "DOUBLE policy needs at least 2 servers"));
        }
        let mut ids = BTreeSet::new();
        for (i, r) in self.releases.iter().enumerate() {
            let field = format!("releases[{i}]");
            if r.version_id.is_empty() {
                return Err(ScenarioError::invalid(format!("{field}.version_id"), "must not be empty"));
            }
            if r.version_id == BASE_VERSION_ID {
                return Err(ScenarioError::invalid(
                    format!("{field}.version_id"),
                    format!("{BASE_VERSION_ID} is reserved for the base model"),
                ));
            }
            if !ids.insert(r.version_id.as_str()) {
                return Err(ScenarioError::invalid(
                    format!("{field}.version_id"),
                    format!("duplicate version id {}", r.version_id),
                ));
            }
            if r.server_update_ms[0] > r.server_update_ms[1] {
                return Err(ScenarioError::invalid(format!("{field}.server_update_ms"), "min must not exceed max"));
            }
            if i > 0 && r.time_ms < self.releases[i - 1].time_ms {
                return Err(ScenarioError::invalid("releases", "must be sorted by time_ms"));
            }
        }
        if self.strategy.policy == Policy::Double && !self.releases.iter().any(|r| r.time_ms == 0) {
            return Err(ScenarioError::invalid(
                "releases",
                "DOUBLE policy needs a release at time_ms 0 so two versions are served initially",
            ));
        }
        match &self.runtime_arrivals {
            RuntimeArrivals::PoissonRatePerUserPerS(rate) => {
                if !rate.is_finite() || *rate < 0.0 {
                    return Err(ScenarioError::invalid(
                        "runtime_arrivals.poisson_rate_per_user_per_s",
                        "must be a finite non-negative number",
                    ));
                }
            }
            RuntimeArrivals::Explicit(list) => {
                for (i, a) in list.iter().enumerate() {
                    let known = a
                        .user_id
                        .strip_prefix('u')
                        .and_then(|n| n.parse::<usize>().ok())
                        .is_some_and(|n| n >= 1 && n <= self.users && user_name(n - 1) == a.user_id);
                    if !known {
                        return Err(ScenarioError::invalid(
                            format!("runtime_arrivals.explicit[{i}].user_id"),
                            format!("unknown user {} (users are u1..u{})", a.user_id, self.users),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Releases with sequence numbers assigned in schedule order, starting at 1.
    pub fn model_releases(&self) -> Vec<ModelRelease> {
        self.releases
            .iter()
            .enumerate()
            .map(|(i, r)| ModelRelease {
                version: VersionId::new(r.version_id.clone(), i as u64 + 1),
                release_time: SimTime(r.time_ms),
                download_ms: r.download_ms,
                server_update_ms_range: (r.server_update_ms[0], r.server_update_ms[1]),
            })
            .collect()
    }

    /// Versions deployed at time zero, oldest first: the base model plus
    /// every release scheduled at `time_ms` 0.
    pub fn initial_versions(&self) -> Vec<VersionId> {
        let mut v = vec![VersionId::new(BASE_VERSION_ID, 0)];
        v.extend(
            self.model_releases()
                .into_iter()
                .filter(|r| r.release_time == SimTime::ZERO)
                .map(|r| r.version),
        );
        v
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_uses_defaults() {
        let s = Scenario::from_json(r#"{"releases":[{"time_ms":1000,"version_id":"V1"}]}"#).unwrap();
        assert_eq!(s.users, 4);
        assert_eq!(s.reenroll_parallelism, 1);
        assert_eq!(s.releases[0].server_update_ms, [100, 300]);
        assert_eq!(s.initial_versions(), vec![VersionId::new("V0", 0)]);
        assert_eq!(s.model_releases()[0].version, VersionId::new("V1", 1));
    }

    #[test]
    fn double_needs_two_servers() {
        let err = Scenario::from_json(
            r#"{"strategy":{"policy":"DOUBLE"},"cloud_servers":1,
                "releases":[{"time_ms":0,"version_id":"V1"}]}"#,
        )
        .unwrap_err();
        match err {
            ScenarioError::Validation { field, .. } => assert_eq!(field, "cloud_servers"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_versions_rejected() {
        let err = Scenario::from_json(
            r#"{"releases":[{"time_ms":10,"version_id":"V1"},{"time_ms":20,"version_id":"V1"}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ScenarioError::Validation { ref field, .. } if field == "releases[1].version_id"));
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let err = Scenario::from_json("{\n  \"users\": 3,\n  \"colour\": 1\n}").unwrap_err();
        match err {
            ScenarioError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(
            Scenario::from_json(r#"{"latency":{"device_frontend":{"base_ms":1,"jitter":2}}}"#),
            Err(ScenarioError::Parse { .. })
        ));
    }

    #[test]
    fn unsorted_releases_and_unknown_arrival_users() {
        assert!(Scenario::from_json(
            r#"{"releases":[{"time_ms":20,"version_id":"V1"},{"time_ms":10,"version_id":"V2"}]}"#
        )
        .is_err());
        assert!(Scenario::from_json(r#"{"users":2,"runtime_arrivals":{"explicit":[{"time_ms":1,"user_id":"u3"}]}}"#).is_err());
        assert!(Scenario::from_json(r#"{"users":2,"runtime_arrivals":{"explicit":[{"time_ms":1,"user_id":"u02"}]}}"#).is_err());
        assert!(Scenario::from_json(r#"{"users":2,"runtime_arrivals":{"explicit":[{"time_ms":1,"user_id":"u2"}]}}"#).is_ok());
    }

    #[test]
    fn json_round_trip() {
        let s = Scenario::default();
        let text = s.to_json();
        let back = Scenario::from_json(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_json(), text);
    }
}
