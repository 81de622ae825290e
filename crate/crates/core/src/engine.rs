//! Deterministic mock speech engine.
//!
//! Enrollment hashes the model id, the user id and the sorted sample seeds
//! with FNV-1a 64; recognition scores by speaker identity alone. The only
//! thing the engine really checks is that every profile it is handed was
//! produced by the model it is serving.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::domain::{AudioSample, RecognitionResult, UserId, UserProfile, VersionId};

const FNV_OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
const FNV_PRIME: u64 = 1_099_511_628_211;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("no enrollment audio")]
    EmptyAudio,
    #[error("no candidate profiles")]
    NoCandidates,
    /// Tripwire: a profile produced by one model was scored by another.
    #[error("profile of {user_id} is at {profile}, engine serves {model}")]
    VersionMismatch {
        user_id: UserId,
        profile: String,
        model: String,
    },
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Incremental FNV-1a, used where the hashed message is assembled piecewise.
#[derive(Debug, Clone, Copy)]
struct Fnv1a64(u64);

impl Fnv1a64 {
    fn new() -> Self {
        Self(FNV_OFFSET_BASIS)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0 ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
    }

    fn finish(self) -> u64 {
        self.0
    }
}

/// Profile digest over `model id \0 user id \0 seeds...` with the seeds sorted
/// ascending and written big-endian.
pub fn profile_digest(model_id: &str, user_id: &str, audio: &[AudioSample]) -> u64 {
    let mut seeds: Vec<u64> = audio.iter().map(|s| s.seed).collect();
    seeds.sort_unstable();
    let mut h = Fnv1a64::new();
    h.write(model_id.as_bytes());
    h.write(&[0]);
    h.write(user_id.as_bytes());
    h.write(&[0]);
    for seed in seeds {
        h.write(&seed.to_be_bytes());
    }
    h.finish()
}

/// One loaded model together with its fixed processing costs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineInstance {
    model: VersionId,
    enroll_cost_ms_per_sample: u64,
    runtime_cost_ms: u64,
}

impl EngineInstance {
    /// Costs must be positive; zero is clamped to 1 ms.
    pub fn new(model: VersionId, enroll_cost_ms_per_sample: u64, runtime_cost_ms: u64) -> Self {
        Self {
            model,
            enroll_cost_ms_per_sample: enroll_cost_ms_per_sample.max(1),
            runtime_cost_ms: runtime_cost_ms.max(1),
        }
    }

    pub fn model(&self) -> &VersionId {
        &self.model
    }

    /// Same costs, different model.
    pub fn with_model(&self, model: VersionId) -> Self {
        Self {
            model,
            ..self.clone()
        }
    }

    pub fn enroll_cost_ms(&self, samples: usize) -> u64 {
        samples as u64 * self.enroll_cost_ms_per_sample
    }

    pub fn runtime_cost_ms(&self) -> u64 {
        self.runtime_cost_ms
    }

    pub fn enroll(&self, user_id: &str, audio: &[AudioSample]) -> Result<UserProfile, EngineError> {
        if audio.is_empty() {
            return Err(EngineError::EmptyAudio);
        }
        Ok(UserProfile {
            user_id: user_id.to_owned(),
            version: self.model.clone(),
            digest: profile_digest(&self.model.id, user_id, audio),
        })
    }

    pub fn recognize(
        &self,
        runtime_audio: &AudioSample,
        profiles: &BTreeMap<UserId, UserProfile>,
    ) -> Result<BTreeMap<UserId, RecognitionResult>, EngineError> {
        if profiles.is_empty() {
            return Err(EngineError::NoCandidates);
        }
        if let Some(bad) = profiles.values().find(|p| p.version != self.model) {
            return Err(EngineError::VersionMismatch {
                user_id: bad.user_id.clone(),
                profile: bad.version.id.clone(),
                model: self.model.id.clone(),
            });
        }
        Ok(profiles
            .iter()
            .map(|(user, p)| {
                let score = if p.user_id == runtime_audio.speaker_id {
                    1.0
                } else {
                    0.0
                };
                (user.clone(), RecognitionResult::from_score(score))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn audio(speaker: &str, seeds: &[u64]) -> Vec<AudioSample> {
        seeds
            .iter()
            .map(|&seed| AudioSample {
                speaker_id: speaker.into(),
                seed,
                duration_ms: 3000,
            })
            .collect()
    }

    fn engine(id: &str, seq: u64) -> EngineInstance {
        EngineInstance::new(VersionId::new(id, seq), 10, 20)
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn enroll_is_pure() {
        let e = engine("V2", 2);
        let a = e.enroll("u1", &audio("u1", &[1, 2, 3])).unwrap();
        let b = e.enroll("u1", &audio("u1", &[1, 2, 3])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn digests_differ_across_models() {
        // Reference values computed with a standalone FNV-1a script.
        let a = audio("u1", &[7]);
        let v2 = engine("V2", 2).enroll("u1", &a).unwrap();
        let v3 = engine("V3", 3).enroll("u1", &a).unwrap();
        assert_eq!(v2.digest, 0x8e67_9927_4a35_8e3a);
        assert_eq!(v3.digest, 0xa61d_5f11_1511_dec9);
        assert_ne!(v2.version, v3.version);
    }

    #[test]
    fn sample_order_does_not_matter() {
        let e = engine("V1", 1);
        let a = e.enroll("u1", &audio("u1", &[5, 3])).unwrap();
        let b = e.enroll("u1", &audio("u1", &[3, 5])).unwrap();
        assert_eq!(a.digest, b.digest);
        assert_eq!(a.digest, 0xb512_9c88_0174_767c);
    }

    #[test]
    fn enroll_without_audio_fails() {
        assert_eq!(engine("V1", 1).enroll("u1", &[]), Err(EngineError::EmptyAudio));
    }

    #[test]
    fn recognize_scores_by_speaker() {
        let e = engine("V2", 2);
        let mut profiles = BTreeMap::new();
        for u in ["u1", "u2"] {
            profiles.insert(u.to_string(), e.enroll(u, &audio(u, &[1])).unwrap());
        }
        let probe = &audio("u1", &[99])[0];
        let out = e.recognize(probe, &profiles).unwrap();
        assert_eq!(out["u1"], RecognitionResult { score: 1.0, accepted: true });
        assert_eq!(out["u2"], RecognitionResult { score: 0.0, accepted: false });
    }

    #[test]
    fn single_candidate_match() {
        let e = engine("V2", 2);
        let profiles =
            BTreeMap::from([("u1".to_string(), e.enroll("u1", &audio("u1", &[4])).unwrap())]);
        let out = e.recognize(&audio("u1", &[5])[0], &profiles).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out["u1"].accepted);
    }

    #[test]
    fn stale_profile_trips_mismatch() {
        let old = engine("V1", 1).enroll("u1", &audio("u1", &[1])).unwrap();
        let profiles = BTreeMap::from([("u1".to_string(), old)]);
        let err = engine("V2", 2)
            .recognize(&audio("u1", &[2])[0], &profiles)
            .unwrap_err();
        assert!(matches!(err, EngineError::VersionMismatch { .. }));
    }

    #[test]
    fn recognize_requires_candidates() {
        let err = engine("V2", 2)
            .recognize(&audio("u1", &[2])[0], &BTreeMap::new())
            .unwrap_err();
        assert_eq!(err, EngineError::NoCandidates);
    }

    #[test]
    fn costs() {
        let e = engine("V1", 1);
        assert_eq!(e.enroll_cost_ms(3), 30);
        assert_eq!(e.runtime_cost_ms(), 20);
    }
}
