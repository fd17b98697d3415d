//! The in-memory skill bank: id-unique, status-transition-checked, and
//! deletion-free. Snapshots serialize every skill (canonical YAML plus its
//! embedding) deterministically so that restores are byte-identical.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::retrieval::EmbeddingVector;
use crate::skill::{parse_skill, Skill, SkillStatus, ValidationError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BankError {
    #[error("duplicate skill id: {0}")]
    DuplicateId(String),
    #[error("unknown skill: {0}")]
    UnknownSkill(String),
    #[error("illegal status transition for {id}: {from:?} -> {to:?}")]
    IllegalTransition { id: String, from: SkillStatus, to: SkillStatus },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

impl From<ValidationError> for BankError {
    fn from(e: ValidationError) -> Self {
        BankError::CorruptSnapshot(e.to_string())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Bank {
    skills: BTreeMap<String, Skill>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotSkill {
    yaml: String,
    embedding: Option<Vec<f64>>,
}

impl Bank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, skill: Skill) -> Result<(), BankError> {
        if self.skills.contains_key(&skill.id) {
            return Err(BankError::DuplicateId(skill.id));
        }
        self.skills.insert(skill.id.clone(), skill);
        Ok(())
    }

    /// Mint an id that does not collide with any existing skill: the
    /// proposed id itself, else `{id}_2`, `{id}_3`, …
    pub fn unique_id(&self, proposed: &str) -> String {
        if !self.skills.contains_key(proposed) {
            return proposed.to_string();
        }
        let mut n = 2;
        loop {
            let candidate = format!("{proposed}_{n}");
            if !self.skills.contains_key(&candidate) {
                return candidate;
            }
            n += 1;
        }
    }

    pub fn get(&self, id: &str) -> Option<&Skill> {
        self.skills.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.skills.contains_key(id)
    }

    /// All skills in id order.
    pub fn all(&self) -> impl Iterator<Item = &Skill> {
        self.skills.values()
    }

    pub fn with_status(&self, status: SkillStatus) -> Vec<&Skill> {
        self.skills.values().filter(|s| s.status == status).collect()
    }

    pub fn active(&self) -> Vec<Skill> {
        self.skills.values().filter(|s| s.status == SkillStatus::Active).cloned().collect()
    }

    /// ACTIVE plus CANDIDATE skills — everything dedup compares against.
    pub fn live(&self) -> Vec<&Skill> {
        self.skills
            .values()
            .filter(|s| s.status != SkillStatus::Deprecated)
            .collect()
    }

    pub fn count_with_status(&self, status: SkillStatus) -> usize {
        self.skills.values().filter(|s| s.status == status).count()
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    /// Move a skill along one of the declared lifecycle edges; anything else
    /// is rejected. `updated_at` is bumped to `now`.
    pub fn set_status(
        &mut self,
        id: &str,
        to: SkillStatus,
        now: DateTime<Utc>,
    ) -> Result<(), BankError> {
        let skill = self
            .skills
            .get_mut(id)
            .ok_or_else(|| BankError::UnknownSkill(id.to_string()))?;
        if !skill.status.can_transition(to) {
            return Err(BankError::IllegalTransition { id: id.to_string(), from: skill.status, to });
        }
        skill.status = to;
        skill.updated_at = now;
        Ok(())
    }

    /// Deterministic serialized form of the whole bank.
    pub fn snapshot_bytes(&self) -> String {
        let entries: Vec<SnapshotSkill> = self
            .skills
            .values()
            .map(|s| SnapshotSkill {
                yaml: s.canonical_yaml(),
                embedding: s.embedding.as_ref().map(|e| e.0.clone()),
            })
            .collect();
        serde_json::to_string(&entries).expect("bank serialization cannot fail")
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.snapshot_bytes().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_snapshot_bytes(bytes: &str) -> Result<Bank, BankError> {
        let entries: Vec<SnapshotSkill> =
            serde_json::from_str(bytes).map_err(|e| BankError::CorruptSnapshot(e.to_string()))?;
        let mut bank = Bank::new();
        for entry in entries {
            let mut skill = parse_skill(&entry.yaml)?;
            skill.embedding = entry.embedding.map(EmbeddingVector);
            bank.insert(skill)?;
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skill::tests::sample_skill;

    #[test]
    fn insert_rejects_duplicates_and_uniquifies() {
        let mut bank = Bank::new();
        bank.insert(sample_skill()).unwrap();
        assert!(matches!(bank.insert(sample_skill()), Err(BankError::DuplicateId(_))));
        assert_eq!(bank.unique_id("guard_null_input"), "guard_null_input_2");
        assert_eq!(bank.unique_id("fresh"), "fresh");
    }

    #[test]
    fn status_transitions_are_checked() {
        let mut bank = Bank::new();
        bank.insert(sample_skill()).unwrap();
        let now = DateTime::UNIX_EPOCH;
        bank.set_status("guard_null_input", SkillStatus::Active, now).unwrap();
        bank.set_status("guard_null_input", SkillStatus::Deprecated, now).unwrap();
        bank.set_status("guard_null_input", SkillStatus::Active, now).unwrap();
        let err = bank.set_status("guard_null_input", SkillStatus::Candidate, now).unwrap_err();
        assert!(matches!(err, BankError::IllegalTransition { .. }));
        assert!(matches!(
            bank.set_status("ghost", SkillStatus::Active, now),
            Err(BankError::UnknownSkill(_))
        ));
    }

    #[test]
    fn snapshot_round_trip_is_byte_identical() {
        let mut bank = Bank::new();
        let mut s = sample_skill();
        s.embedding = Some(EmbeddingVector(vec![0.25, -0.5, 0.125]));
        bank.insert(s).unwrap();
        let mut other = sample_skill();
        other.id = "second_skill".to_string();
        bank.insert(other).unwrap();

        let bytes = bank.snapshot_bytes();
        let restored = Bank::from_snapshot_bytes(&bytes).unwrap();
        assert_eq!(restored.snapshot_bytes(), bytes);
        assert_eq!(restored.content_hash(), bank.content_hash());
        assert_eq!(
            restored.get("guard_null_input").unwrap().embedding,
            bank.get("guard_null_input").unwrap().embedding
        );
    }
}
