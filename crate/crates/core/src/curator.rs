//! Outcome-driven curation: retirement once the evidence floor is met and
//! the contribution estimate sits at or below the threshold, plus hard
//! active-cap enforcement by lowest-contribution eviction. Retirement never
//! deletes — status flips to DEPRECATED and the evidence stays addressable.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{Bank, BankError};
use crate::evidence::ContributionSource;
use crate::skill::SkillStatus;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CuratorError {
    #[error("unknown skill: {0}")]
    UnknownSkill(String),
    #[error("skill {0} is not deprecated")]
    NotDeprecated(String),
}

/// Governance knobs: evidence floor, retirement threshold, active cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CuratorConfig {
    pub n_min: u64,
    pub tau: f64,
    pub cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetiredEntry {
    pub skill_id: String,
    pub trials: u64,
    pub c_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictedEntry {
    pub skill_id: String,
    pub c_hat: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub retired: Vec<RetiredEntry>,
    pub evicted: Vec<EvictedEntry>,
    pub active_after: usize,
}

/// Retire every ACTIVE skill with `trials ≥ n_min` and `ĉ ≤ -τ` (inclusive).
/// Skills under the evidence floor are untouchable regardless of ĉ, and an
/// undefined ĉ (zero trials) never retires.
pub fn retirement_pass(
    bank: &mut Bank,
    log: &dyn ContributionSource,
    cfg: &CuratorConfig,
    now: DateTime<Utc>,
) -> CurationReport {
    let mut report = CurationReport::default();
    let active_ids: Vec<String> =
        bank.with_status(SkillStatus::Active).iter().map(|s| s.id.clone()).collect();
    for id in active_ids {
        let stats = log.contribution(&id);
        let Some(c_hat) = stats.c_hat else { continue };
        if stats.trials >= cfg.n_min && c_hat <= -cfg.tau {
            bank.set_status(&id, SkillStatus::Deprecated, now)
                .expect("active skill can always be deprecated");
            report.retired.push(RetiredEntry { skill_id: id, trials: stats.trials, c_hat });
        }
    }
    report.active_after = bank.count_with_status(SkillStatus::Active);
    report
}

/// While the ACTIVE count exceeds the cap, evict (deprecate) the skill with
/// the lowest contribution. Undefined ĉ ranks lowest (unvetted skills go
/// first when the cap binds); ties break by older `created_at`, then id.
pub fn enforce_cap(
    bank: &mut Bank,
    log: &dyn ContributionSource,
    cap: usize,
    now: DateTime<Utc>,
) -> CurationReport {
    let mut report = CurationReport::default();
    let active = bank.with_status(SkillStatus::Active);
    let excess = active.len().saturating_sub(cap);
    if excess > 0 {
        let mut ranked: Vec<(String, Option<f64>, DateTime<Utc>)> = active
            .iter()
            .map(|s| (s.id.clone(), log.contribution(&s.id).c_hat, s.created_at))
            .collect();
        // undefined ĉ sorts before any defined value
        let key = |c: Option<f64>| c.map_or((0u8, f64::NEG_INFINITY), |v| (1u8, v));
        ranked.sort_by(|a, b| {
            key(a.1)
                .partial_cmp(&key(b.1))
                .unwrap()
                .then_with(|| a.2.cmp(&b.2))
                .then_with(|| a.0.cmp(&b.0))
        });
        for (id, c_hat, _) in ranked.into_iter().take(excess) {
            bank.set_status(&id, SkillStatus::Deprecated, now)
                .expect("active skill can always be deprecated");
            report.evicted.push(EvictedEntry { skill_id: id, c_hat });
        }
    }
    report.active_after = bank.count_with_status(SkillStatus::Active);
    report
}

/// Flip a DEPRECATED skill back to ACTIVE. The caller re-runs cap
/// enforcement in the same curate phase.
pub fn reinstate(bank: &mut Bank, skill_id: &str, now: DateTime<Utc>) -> Result<(), CuratorError> {
    match bank.get(skill_id) {
        None => return Err(CuratorError::UnknownSkill(skill_id.to_string())),
        Some(s) if s.status != SkillStatus::Deprecated => {
            return Err(CuratorError::NotDeprecated(skill_id.to_string()))
        }
        Some(_) => {}
    }
    match bank.set_status(skill_id, SkillStatus::Active, now) {
        Ok(()) => Ok(()),
        Err(BankError::UnknownSkill(id)) => Err(CuratorError::UnknownSkill(id)),
        Err(e) => unreachable!("deprecated -> active is a declared edge: {e}"),
    }
}
