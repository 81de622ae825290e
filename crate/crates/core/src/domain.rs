//! Core value types shared by every part of the simulator: version
//! identifiers, audio stand-ins, user profiles and the request/response
//! schemas exchanged between devices and the serving stack.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a user. Users are named `u1`, `u2`, ... by the scenario builder.
pub type UserId = String;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("inconsistent version registry: seq {seq} carries both {a:?} and {b:?}")]
    InconsistentVersion { seq: u64, a: String, b: String },
    #[error("enrollment request carries no audio")]
    EmptyAudio,
    #[error("enrollment request has an empty user id")]
    EmptyUserId,
}

/// A model version. `id` is opaque and compared only for equality; `seq` is
/// the release sequence number assigned by model storage and defines the
/// total order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VersionId {
    pub id: String,
    pub seq: u64,
}

impl VersionId {
    pub fn new(id: impl Into<String>, seq: u64) -> Self {
        Self { id: id.into(), seq }
    }

    /// True when `self` was released after `other`.
    pub fn is_newer_than(&self, other: &VersionId) -> bool {
        self.seq > other.seq
    }
}

// Collections order versions by `seq`; the id only breaks ties in a corrupt
// registry, which `compare_versions` reports.
impl Ord for VersionId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.seq.cmp(&other.seq).then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for VersionId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for VersionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

/// Orders two versions by release sequence.
///
/// Equal sequence numbers with different ids mean the release registry is
/// corrupt, which is reported rather than silently ordered.
pub fn compare_versions(a: &VersionId, b: &VersionId) -> Result<Ordering, DomainError> {
    match a.seq.cmp(&b.seq) {
        Ordering::Equal if a.id != b.id => Err(DomainError::InconsistentVersion {
            seq: a.seq,
            a: a.id.clone(),
            b: b.id.clone(),
        }),
        ord => Ok(ord),
    }
}

/// Stand-in for a recorded utterance. `seed` plays the role of waveform content.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AudioSample {
    pub speaker_id: UserId,
    pub seed: u64,
    pub duration_ms: u32,
}

/// A versioned profile. `digest` stands in for the aggregated embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub version: VersionId,
    pub digest: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentRequest {
    pub user_id: UserId,
    pub enrollment_audio: Vec<AudioSample>,
}

pub fn validate_enrollment_request(r: &EnrollmentRequest) -> Result<(), DomainError> {
    if r.user_id.is_empty() {
        return Err(DomainError::EmptyUserId);
    }
    if r.enrollment_audio.is_empty() {
        return Err(DomainError::EmptyAudio);
    }
    Ok(())
}

/// Empty for server-side deployment; one profile (single-version hybrid) or
/// two profiles with distinct versions (double-version hybrid).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentResponse {
    pub profiles: Vec<UserProfile>,
}

/// Who the runtime audio is compared against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Candidates {
    /// Server-side: profiles are looked up in the database.
    UserIds(Vec<UserId>),
    /// Hybrid: the device ships its stored profiles with the request.
    Profiles(BTreeMap<UserId, Vec<UserProfile>>),
}

impl Candidates {
    pub fn user_ids(&self) -> Vec<UserId> {
        match self {
            Candidates::UserIds(ids) => ids.clone(),
            Candidates::Profiles(map) => map.keys().cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Candidates::UserIds(ids) => ids.len(),
            Candidates::Profiles(map) => map.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeRequest {
    pub runtime_audio: AudioSample,
    pub candidates: Candidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecognitionResult {
    pub score: f64,
    pub accepted: bool,
}

impl RecognitionResult {
    pub fn from_score(score: f64) -> Self {
        Self {
            score,
            accepted: score >= 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Ok,
    Maintenance,
    StaleProfiles,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Ok, Outcome::Maintenance, Outcome::StaleProfiles];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Ok => "OK",
            Outcome::Maintenance => "MAINTENANCE",
            Outcome::StaleProfiles => "STALE_PROFILES",
        }
    }
}

/// `results` holds one entry per candidate when `outcome` is OK and is empty otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeResponse {
    pub results: BTreeMap<UserId, RecognitionResult>,
    pub outcome: Outcome,
}

impl RuntimeResponse {
    pub fn ok(results: BTreeMap<UserId, RecognitionResult>) -> Self {
        Self {
            results,
            outcome: Outcome::Ok,
        }
    }

    pub fn refused(outcome: Outcome) -> Self {
        Self {
            results: BTreeMap::new(),
            outcome,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(seed: u64) -> AudioSample {
        AudioSample {
            speaker_id: "u1".into(),
            seed,
            duration_ms: 3000,
        }
    }

    #[test]
    fn oldest_sorts_before_newest() {
        let v1 = VersionId::new("V1", 1);
        let v3 = VersionId::new("V3", 3);
        assert_eq!(compare_versions(&v1, &v3), Ok(Ordering::Less));
        assert_eq!(compare_versions(&v3, &v1), Ok(Ordering::Greater));
    }

    #[test]
    fn identical_versions_are_equal() {
        let v2 = VersionId::new("V2", 2);
        assert_eq!(compare_versions(&v2, &v2.clone()), Ok(Ordering::Equal));
    }

    #[test]
    fn same_seq_different_id_is_inconsistent() {
        let a = VersionId::new("A", 5);
        let b = VersionId::new("B", 5);
        assert!(matches!(
            compare_versions(&a, &b),
            Err(DomainError::InconsistentVersion { seq: 5, .. })
        ));
    }

    #[test]
    fn enrollment_request_validation() {
        let ok = EnrollmentRequest {
            user_id: "u1".into(),
            enrollment_audio: vec![sample(1), sample(2), sample(3)],
        };
        assert_eq!(validate_enrollment_request(&ok), Ok(()));

        let no_audio = EnrollmentRequest {
            user_id: "u1".into(),
            enrollment_audio: vec![],
        };
        assert_eq!(
            validate_enrollment_request(&no_audio),
            Err(DomainError::EmptyAudio)
        );

        let no_user = EnrollmentRequest {
            user_id: String::new(),
            enrollment_audio: vec![sample(1)],
        };
        assert_eq!(
            validate_enrollment_request(&no_user),
            Err(DomainError::EmptyUserId)
        );
    }

    #[test]
    fn recognition_threshold() {
        assert!(RecognitionResult::from_score(1.0).accepted);
        assert!(!RecognitionResult::from_score(0.0).accepted);
    }

    fn registry(n: u64) -> Vec<VersionId> {
        (1..=n).map(|s| VersionId::new(format!("V{s}"), s)).collect()
    }

    proptest! {
        #[test]
        fn compare_is_a_total_order(a in 0usize..8, b in 0usize..8, c in 0usize..8) {
            let r = registry(8);
            let (a, b, c) = (&r[a], &r[b], &r[c]);
            let ab = compare_versions(a, b).unwrap();
            let ba = compare_versions(b, a).unwrap();
            prop_assert_eq!(ab, ba.reverse());
            if ab == Ordering::Equal {
                prop_assert_eq!(a, b);
            }
            let bc = compare_versions(b, c).unwrap();
            if ab != Ordering::Greater && bc != Ordering::Greater {
                prop_assert_ne!(compare_versions(a, c).unwrap(), Ordering::Greater);
            }
        }
    }
}
