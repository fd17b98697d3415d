//! Append-only evidence log: every (task, skill, attempt) outcome lands here
//! as a Capsule, every critiqued train failure as a Verdict, and retirement
//! decisions read contribution statistics straight off the raw records.
//!
//! Backed by a single-file SQLite database (or `:memory:`). Appends never
//! mutate or remove existing rows; each round runs inside one transaction,
//! so a crashed or aborted round leaves no partial records. A chained
//! SHA-256 over the append stream is stored per round: the hash at round t
//! is a prefix-hash of the log at round t+k, which is what the append-only
//! acceptance check verifies.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bank::Bank;
use crate::skill::SkillStatus;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvidenceError {
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("unknown capsule: {0}")]
    UnknownCapsule(String),
    #[error("capsule {0} is not a train failure")]
    CapsuleNotAFailure(String),
    #[error("missing snapshot for round {0}")]
    MissingSnapshot(u32),
    #[error("storage failure: {0}")]
    Storage(String),
}

impl From<rusqlite::Error> for EvidenceError {
    fn from(e: rusqlite::Error) -> Self {
        EvidenceError::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }
}

/// One (task, skill, attempt) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub capsule_id: String,
    pub task_id: String,
    pub skill_id: Option<String>,
    pub split: Split,
    pub round: u32,
    pub passed: bool,
    pub solver_output: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Attribution {
    Helped,
    Hurt,
    Neutral,
    Inapplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Confidence {
    Low,
    Medium,
    High,
}

/// Critic attribution plus pattern label for one failed train capsule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub verdict_id: String,
    pub capsule_id: String,
    pub attribution: Attribution,
    pub pattern: String,
    pub confidence: Confidence,
    pub reason: String,
}

/// Per-skill contribution derived from the raw capsule stream.
/// `c_hat` is `(successes - failures) / trials`, undefined at zero trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContributionStats {
    pub skill_id: String,
    pub trials: u64,
    pub successes: u64,
    pub failures: u64,
    pub c_hat: Option<f64>,
}

/// Anything that can answer contribution queries; lets curator logic be
/// tested against hand-built stats without a store.
pub trait ContributionSource {
    fn contribution(&self, skill_id: &str) -> ContributionStats;
}

/// Run-level counters in the shape of the operational-metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationalCounters {
    pub solver_calls: u64,
    pub critic_calls: u64,
    pub synth_calls: u64,
    pub router_engagement_pct: f64,
    pub born: u64,
    pub retired: u64,
    pub active: u64,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum DumpRecord<'a> {
    Capsule(&'a Capsule),
    Verdict(&'a Verdict),
}

fn record_line(rec: &DumpRecord) -> String {
    serde_json::to_string(rec).expect("record serialization cannot fail")
}

fn chain(hash_hex: &str, line: &str) -> String {
    let mut h = Sha256::new();
    h.update(hash_hex.as_bytes());
    h.update(line.as_bytes());
    h.update(b"\n");
    hex_encode(&h.finalize())
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Inner {
    conn: Connection,
    log_hash: String,
}

/// The durable store. One writer per store file; appends are serialized
/// internally, and readers on the same handle see their own writes.
pub struct EvidenceStore {
    inner: Mutex<Inner>,
    train_only_contribution: bool,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS capsules(
  seq INTEGER PRIMARY KEY AUTOINCREMENT,
  capsule_id TEXT NOT NULL UNIQUE,
  task_id TEXT NOT NULL,
  skill_id TEXT,
  split TEXT NOT NULL,
  round INTEGER NOT NULL,
  passed INTEGER NOT NULL,
  solver_output TEXT NOT NULL,
  created_at TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_capsules_skill ON capsules(skill_id);
CREATE INDEX IF NOT EXISTS idx_capsules_round ON capsules(round);
CREATE TABLE IF NOT EXISTS verdicts(
  seq INTEGER PRIMARY KEY AUTOINCREMENT,
  verdict_id TEXT NOT NULL UNIQUE,
  capsule_id TEXT NOT NULL,
  attribution TEXT NOT NULL,
  pattern TEXT NOT NULL,
  confidence TEXT NOT NULL,
  reason TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS skills(
  seq INTEGER PRIMARY KEY AUTOINCREMENT,
  skill_id TEXT NOT NULL,
  round INTEGER NOT NULL,
  event TEXT NOT NULL,
  yaml TEXT,
  embedding TEXT
);
CREATE TABLE IF NOT EXISTS snapshots(
  round INTEGER NOT NULL,
  kind TEXT NOT NULL,
  bank_json TEXT NOT NULL,
  hash TEXT NOT NULL,
  PRIMARY KEY (round, kind)
);
CREATE TABLE IF NOT EXISTS rounds(
  round INTEGER PRIMARY KEY,
  result_json TEXT NOT NULL,
  log_hash TEXT NOT NULL,
  solver_calls INTEGER NOT NULL,
  critic_calls INTEGER NOT NULL,
  synth_calls INTEGER NOT NULL
);
";

impl EvidenceStore {
    pub fn open_file(path: &Path) -> Result<Self, EvidenceError> {
        Self::setup(Connection::open(path)?)
    }

    pub fn open_memory() -> Result<Self, EvidenceError> {
        Self::setup(Connection::open_in_memory()?)
    }

    fn setup(conn: Connection) -> Result<Self, EvidenceError> {
        conn.execute_batch("PRAGMA journal_mode=TRUNCATE; PRAGMA synchronous=NORMAL;")?;
        conn.execute_batch(SCHEMA)?;
        let store = EvidenceStore {
            inner: Mutex::new(Inner { conn, log_hash: String::new() }),
            train_only_contribution: false,
        };
        store.recover()?;
        Ok(store)
    }

    /// Restrict the contribution estimator to train capsules (sensitivity
    /// knob; the default counts both splits).
    pub fn with_train_only_contribution(mut self, train_only: bool) -> Self {
        self.train_only_contribution = train_only;
        self
    }

    /// Reopening an existing file: committed rounds are the recovery
    /// boundary (uncommitted work never reached the file), so recovery is
    /// recomputing the hash chain from the surviving records.
    fn recover(&self) -> Result<(), EvidenceError> {
        let records = self.dump_records()?;
        let mut inner = self.inner.lock().unwrap();
        let mut h = String::new();
        for line in &records {
            h = chain(&h, line);
        }
        inner.log_hash = h;
        Ok(())
    }

    pub fn begin_round(&self) -> Result<(), EvidenceError> {
        let inner = self.inner.lock().unwrap();
        inner.conn.execute_batch("BEGIN IMMEDIATE")?;
        Ok(())
    }

    pub fn commit_round(
        &self,
        round: u32,
        result_json: &str,
        solver_calls: u64,
        critic_calls: u64,
        synth_calls: u64,
    ) -> Result<(), EvidenceError> {
        let inner = self.inner.lock().unwrap();
        inner.conn.execute(
            "INSERT INTO rounds(round, result_json, log_hash, solver_calls, critic_calls, synth_calls)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![round, result_json, inner.log_hash, solver_calls, critic_calls, synth_calls],
        )?;
        inner.conn.execute_batch("COMMIT")?;
        Ok(())
    }

    /// Abort the in-flight round; every append since `begin_round` is
    /// discarded and the hash chain rewinds with it.
    pub fn abort_round(&self) -> Result<(), EvidenceError> {
        {
            let inner = self.inner.lock().unwrap();
            inner.conn.execute_batch("ROLLBACK")?;
        }
        self.recover()
    }

    pub fn append_capsule(&self, c: &Capsule) -> Result<String, EvidenceError> {
        let mut inner = self.inner.lock().unwrap();
        let res = inner.conn.execute(
            "INSERT INTO capsules(capsule_id, task_id, skill_id, split, round, passed, solver_output, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                c.capsule_id,
                c.task_id,
                c.skill_id,
                c.split.as_str(),
                c.round,
                c.passed as i64,
                c.solver_output,
                c.created_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            ],
        );
        map_unique_violation(res, &c.capsule_id)?;
        let line = record_line(&DumpRecord::Capsule(c));
        inner.log_hash = chain(&inner.log_hash, &line);
        Ok(c.capsule_id.clone())
    }

    pub fn append_verdict(&self, v: &Verdict) -> Result<String, EvidenceError> {
        let mut inner = self.inner.lock().unwrap();
        let row: Option<(String, bool)> = inner
            .conn
            .query_row(
                "SELECT split, passed FROM capsules WHERE capsule_id = ?1",
                params![v.capsule_id],
                |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)? != 0)),
            )
            .optional()?;
        match row {
            None => return Err(EvidenceError::UnknownCapsule(v.capsule_id.clone())),
            Some((split, passed)) => {
                if split != "train" || passed {
                    return Err(EvidenceError::CapsuleNotAFailure(v.capsule_id.clone()));
                }
            }
        }
        let res = inner.conn.execute(
            "INSERT INTO verdicts(verdict_id, capsule_id, attribution, pattern, confidence, reason)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                v.verdict_id,
                v.capsule_id,
                attribution_str(v.attribution),
                v.pattern,
                confidence_str(v.confidence),
                v.reason,
            ],
        );
        map_unique_violation(res, &v.verdict_id)?;
        let line = record_line(&DumpRecord::Verdict(v));
        inner.log_hash = chain(&inner.log_hash, &line);
        Ok(v.verdict_id.clone())
    }

    pub fn read_capsule(&self, capsule_id: &str) -> Result<Option<Capsule>, EvidenceError> {
        let inner = self.inner.lock().unwrap();
        let cap = inner
            .conn
            .query_row(
                "SELECT capsule_id, task_id, skill_id, split, round, passed, solver_output, created_at
                 FROM capsules WHERE capsule_id = ?1",
                params![capsule_id],
                row_to_capsule,
            )
            .optional()?;
        Ok(cap)
    }

    /// Contribution stats over all capsules referencing the skill. Unknown
    /// skills yield zero trials and an undefined estimate.
    pub fn contribution_stats(&self, skill_id: &str) -> Result<ContributionStats, EvidenceError> {
        let inner = self.inner.lock().unwrap();
        let sql = if self.train_only_contribution {
            "SELECT COUNT(*), COALESCE(SUM(passed), 0) FROM capsules WHERE skill_id = ?1 AND split = 'train'"
        } else {
            "SELECT COUNT(*), COALESCE(SUM(passed), 0) FROM capsules WHERE skill_id = ?1"
        };
        let (trials, successes): (u64, u64) =
            inner.conn.query_row(sql, params![skill_id], |r| Ok((r.get(0)?, r.get(1)?)))?;
        Ok(make_stats(skill_id, trials, successes))
    }

    /// Verdicts whose capsule round lies in `[round - w + 1, round]`,
    /// clipped at 0, in append order, paired with their capsules.
    pub fn verdicts_in_window(
        &self,
        current_round: u32,
        w: u32,
    ) -> Result<Vec<(Verdict, Capsule)>, EvidenceError> {
        assert!(w >= 1, "window must be at least one round");
        let lo = current_round.saturating_sub(w - 1);
        let inner = self.inner.lock().unwrap();
        let mut stmt = inner.conn.prepare(
            "SELECT v.verdict_id, v.capsule_id, v.attribution, v.pattern, v.confidence, v.reason,
                    c.capsule_id, c.task_id, c.skill_id, c.split, c.round, c.passed, c.solver_output, c.created_at
             FROM verdicts v JOIN capsules c ON v.capsule_id = c.capsule_id
             WHERE c.round >= ?1 AND c.round <= ?2
             ORDER BY v.seq",
        )?;
        let rows = stmt.query_map(params![lo, current_round], |r| {
            let verdict = Verdict {
                verdict_id: r.get(0)?,
                capsule_id: r.get(1)?,
                attribution: parse_attribution(&r.get::<_, String>(2)?),
                pattern: r.get(3)?,
                confidence: parse_confidence(&r.get::<_, String>(4)?),
                reason: r.get(5)?,
            };
            let capsule = row_to_capsule_offset(r, 6)?;
            Ok((verdict, capsule))
        })?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row?);
        }
        Ok(out)
    }

    pub fn record_skill_event(
        &self,
        skill_id: &str,
        round: u32,
        event: &str,
        yaml: Option<&str>,
        embedding_json: Option<&str>,
    ) -> Result<(), EvidenceError> {
        let inner = self.inner.lock().unwrap();
        inner.conn.execute(
            "INSERT INTO skills(skill_id, round, event, yaml, embedding) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![skill_id, round, event, yaml, embedding_json],
        )?;
        Ok(())
    }

    pub fn skill_event_ids(&self, event: &str) -> Result<Vec<(String, u32)>, EvidenceError> {
        let inner = self.inner.lock().unwrap();
        let mut stmt = inner
            .conn
            .prepare("SELECT skill_id, round FROM skills WHERE event = ?1 ORDER BY seq")?;
        let rows = stmt.query_map(params![event], |r| Ok((r.get(0)?, r.get(1)?)))?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row?);
        }
        Ok(out)
    }

    pub fn save_snapshot(
        &self,
        round: u32,
        kind: &str,
        bank_json: &str,
        hash: &str,
    ) -> Result<(), EvidenceError> {
        let inner = self.inner.lock().unwrap();
        inner.conn.execute(
            "INSERT OR REPLACE INTO snapshots(round, kind, bank_json, hash) VALUES (?1, ?2, ?3, ?4)",
            params![round, kind, bank_json, hash],
        )?;
        Ok(())
    }

    pub fn load_snapshot(&self, round: u32, kind: &str) -> Result<(String, String), EvidenceError> {
        let inner = self.inner.lock().unwrap();
        inner
            .conn
            .query_row(
                "SELECT bank_json, hash FROM snapshots WHERE round = ?1 AND kind = ?2",
                params![round, kind],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()?
            .ok_or(EvidenceError::MissingSnapshot(round))
    }

    pub fn max_committed_round(&self) -> Result<Option<u32>, EvidenceError> {
        let inner = self.inner.lock().unwrap();
        Ok(inner.conn.query_row("SELECT MAX(round) FROM rounds", [], |r| r.get(0))?)
    }

    pub fn round_log_hashes(&self) -> Result<Vec<(u32, String)>, EvidenceError> {
        let inner = self.inner.lock().unwrap();
        let mut stmt =
            inner.conn.prepare("SELECT round, log_hash FROM rounds ORDER BY round")?;
        let rows = stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row?);
        }
        Ok(out)
    }

    pub fn round_results(&self) -> Result<Vec<(u32, String)>, EvidenceError> {
        let inner = self.inner.lock().unwrap();
        let mut stmt =
            inner.conn.prepare("SELECT round, result_json FROM rounds ORDER BY round")?;
        let rows = stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row?);
        }
        Ok(out)
    }

    pub fn current_log_hash(&self) -> String {
        self.inner.lock().unwrap().log_hash.clone()
    }

    fn capsule_rows(&self, round: u32) -> Result<Vec<Capsule>, EvidenceError> {
        let inner = self.inner.lock().unwrap();
        let mut stmt = inner.conn.prepare(
            "SELECT capsule_id, task_id, skill_id, split, round, passed, solver_output, created_at
             FROM capsules WHERE round = ?1 ORDER BY seq",
        )?;
        let rows = stmt.query_map(params![round], row_to_capsule)?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row?);
        }
        Ok(out)
    }

    fn verdict_rows(&self, round: u32) -> Result<Vec<Verdict>, EvidenceError> {
        let inner = self.inner.lock().unwrap();
        let mut stmt = inner.conn.prepare(
            "SELECT v.verdict_id, v.capsule_id, v.attribution, v.pattern, v.confidence, v.reason
             FROM verdicts v JOIN capsules c ON v.capsule_id = c.capsule_id
             WHERE c.round = ?1 ORDER BY v.seq",
        )?;
        let rows = stmt.query_map(params![round], |r| {
            Ok(Verdict {
                verdict_id: r.get(0)?,
                capsule_id: r.get(1)?,
                attribution: parse_attribution(&r.get::<_, String>(2)?),
                pattern: r.get(3)?,
                confidence: parse_confidence(&r.get::<_, String>(4)?),
                reason: r.get(5)?,
            })
        })?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row?);
        }
        Ok(out)
    }

    fn present_rounds(&self) -> Result<Vec<u32>, EvidenceError> {
        let inner = self.inner.lock().unwrap();
        let mut stmt =
            inner.conn.prepare("SELECT DISTINCT round FROM capsules ORDER BY round")?;
        let rows = stmt.query_map([], |r| r.get(0))?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row?);
        }
        Ok(out)
    }

    /// Every record as a JSON line, capsules then verdicts per round, in
    /// append order. This is both the export format and the hash-chain
    /// input.
    pub fn dump_records(&self) -> Result<Vec<String>, EvidenceError> {
        let mut lines = Vec::new();
        for round in self.present_rounds()? {
            for c in self.capsule_rows(round)? {
                lines.push(record_line(&DumpRecord::Capsule(&c)));
            }
            for v in self.verdict_rows(round)? {
                lines.push(record_line(&DumpRecord::Verdict(&v)));
            }
        }
        Ok(lines)
    }

    pub fn dump_jsonl(&self, out: &mut dyn Write) -> Result<(), EvidenceError> {
        for line in self.dump_records()? {
            writeln!(out, "{line}").map_err(|e| EvidenceError::Storage(e.to_string()))?;
        }
        Ok(())
    }

    /// Recompute the hash chain from the dump and check every stored
    /// per-round hash is a prefix of it. Returns the number of rounds
    /// verified.
    pub fn verify_prefix_hashes(&self) -> Result<usize, EvidenceError> {
        let stored: BTreeMap<u32, String> = self.round_log_hashes()?.into_iter().collect();
        let mut h = String::new();
        let mut verified = 0;
        for round in self.present_rounds()? {
            for c in self.capsule_rows(round)? {
                h = chain(&h, &record_line(&DumpRecord::Capsule(&c)));
            }
            for v in self.verdict_rows(round)? {
                h = chain(&h, &record_line(&DumpRecord::Verdict(&v)));
            }
            if let Some(expect) = stored.get(&round) {
                if *expect != h {
                    return Err(EvidenceError::Storage(format!(
                        "log hash mismatch at round {round}"
                    )));
                }
                verified += 1;
            }
        }
        Ok(verified)
    }

    /// Run-level counters. Solver calls are capsule appends; critic and
    /// synth calls come from the per-round counters the engine records.
    pub fn operational_counters(&self, bank: &Bank) -> Result<OperationalCounters, EvidenceError> {
        let (solver_from_rounds, critic, synth): (u64, u64, u64) = {
            let inner = self.inner.lock().unwrap();
            inner.conn.query_row(
                "SELECT COALESCE(SUM(solver_calls),0), COALESCE(SUM(critic_calls),0), COALESCE(SUM(synth_calls),0) FROM rounds",
                [],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
            )?
        };
        let (eval_total, eval_engaged): (u64, u64) = {
            let inner = self.inner.lock().unwrap();
            inner.conn.query_row(
                "SELECT COUNT(*), COALESCE(SUM(skill_id IS NOT NULL), 0) FROM capsules WHERE split = 'eval'",
                [],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )?
        };
        let born = self.skill_event_ids("born")?.len() as u64;
        let engagement = if eval_total > 0 {
            eval_engaged as f64 / eval_total as f64
        } else {
            0.0
        };
        Ok(OperationalCounters {
            solver_calls: solver_from_rounds,
            critic_calls: critic,
            synth_calls: synth,
            router_engagement_pct: engagement,
            born,
            retired: bank.count_with_status(SkillStatus::Deprecated) as u64,
            active: bank.count_with_status(SkillStatus::Active) as u64,
        })
    }
}

impl ContributionSource for EvidenceStore {
    fn contribution(&self, skill_id: &str) -> ContributionStats {
        self.contribution_stats(skill_id)
            .expect("contribution query cannot fail on a healthy store")
    }
}

pub fn make_stats(skill_id: &str, trials: u64, successes: u64) -> ContributionStats {
    let failures = trials - successes;
    let c_hat = if trials > 0 {
        Some((successes as f64 - failures as f64) / trials as f64)
    } else {
        None
    };
    ContributionStats { skill_id: skill_id.to_string(), trials, successes, failures, c_hat }
}

fn map_unique_violation(res: Result<usize, rusqlite::Error>, id: &str) -> Result<(), EvidenceError> {
    match res {
        Ok(_) => Ok(()),
        Err(rusqlite::Error::SqliteFailure(e, _))
            if e.code == rusqlite::ErrorCode::ConstraintViolation =>
        {
            Err(EvidenceError::DuplicateId(id.to_string()))
        }
        Err(e) => Err(e.into()),
    }
}

fn row_to_capsule(r: &rusqlite::Row<'_>) -> rusqlite::Result<Capsule> {
    row_to_capsule_offset(r, 0)
}

fn row_to_capsule_offset(r: &rusqlite::Row<'_>, o: usize) -> rusqlite::Result<Capsule> {
    let split_text: String = r.get(o + 3)?;
    let ts_text: String = r.get(o + 7)?;
    Ok(Capsule {
        capsule_id: r.get(o)?,
        task_id: r.get(o + 1)?,
        skill_id: r.get(o + 2)?,
        split: Split::parse(&split_text).expect("split column is constrained"),
        round: r.get(o + 4)?,
        passed: r.get::<_, i64>(o + 5)? != 0,
        solver_output: r.get(o + 6)?,
        created_at: DateTime::parse_from_rfc3339(&ts_text)
            .expect("timestamp column is RFC 3339")
            .with_timezone(&Utc),
    })
}

fn attribution_str(a: Attribution) -> &'static str {
    match a {
        Attribution::Helped => "HELPED",
        Attribution::Hurt => "HURT",
        Attribution::Neutral => "NEUTRAL",
        Attribution::Inapplicable => "INAPPLICABLE",
    }
}

fn parse_attribution(s: &str) -> Attribution {
    match s {
        "HELPED" => Attribution::Helped,
        "HURT" => Attribution::Hurt,
        "NEUTRAL" => Attribution::Neutral,
        _ => Attribution::Inapplicable,
    }
}

fn confidence_str(c: Confidence) -> &'static str {
    match c {
        Confidence::Low => "LOW",
        Confidence::Medium => "MEDIUM",
        Confidence::High => "HIGH",
    }
}

fn parse_confidence(s: &str) -> Confidence {
    match s {
        "LOW" => Confidence::Low,
        "HIGH" => Confidence::High,
        _ => Confidence::Medium,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn capsule(id: &str, task: &str, skill: Option<&str>, split: Split, round: u32, passed: bool) -> Capsule {
        Capsule {
            capsule_id: id.to_string(),
            task_id: task.to_string(),
            skill_id: skill.map(str::to_string),
            split,
            round,
            passed,
            solver_output: if passed { "PASS".into() } else { "FAIL".into() },
            created_at: DateTime::UNIX_EPOCH,
        }
    }

    fn verdict(id: &str, capsule_id: &str, pattern: &str) -> Verdict {
        Verdict {
            verdict_id: id.to_string(),
            capsule_id: capsule_id.to_string(),
            attribution: Attribution::Inapplicable,
            pattern: pattern.to_string(),
            confidence: Confidence::Medium,
            reason: "test".to_string(),
        }
    }

    fn open_with_round() -> EvidenceStore {
        let store = EvidenceStore::open_memory().unwrap();
        store.begin_round().unwrap();
        store
    }

    #[test]
    fn append_then_read_back() {
        let store = open_with_round();
        let c = capsule("c1", "t1", Some("s1"), Split::Eval, 0, true);
        store.append_capsule(&c).unwrap();
        assert_eq!(store.read_capsule("c1").unwrap().unwrap(), c);
        assert!(store.read_capsule("nope").unwrap().is_none());
    }

    #[test]
    fn duplicate_capsule_id_rejected() {
        let store = open_with_round();
        let c = capsule("c1", "t1", None, Split::Eval, 0, true);
        store.append_capsule(&c).unwrap();
        assert_eq!(
            store.append_capsule(&c).unwrap_err(),
            EvidenceError::DuplicateId("c1".to_string())
        );
    }

    #[test]
    fn verdict_preconditions() {
        let store = open_with_round();
        store.append_capsule(&capsule("fail_train", "t", Some("s"), Split::Train, 0, false)).unwrap();
        store.append_capsule(&capsule("pass_train", "t", Some("s"), Split::Train, 0, true)).unwrap();
        store.append_capsule(&capsule("fail_eval", "t", Some("s"), Split::Eval, 0, false)).unwrap();

        store.append_verdict(&verdict("v1", "fail_train", "p")).unwrap();
        assert_eq!(
            store.append_verdict(&verdict("v2", "pass_train", "p")).unwrap_err(),
            EvidenceError::CapsuleNotAFailure("pass_train".to_string())
        );
        // eval capsules are never critiqued
        assert_eq!(
            store.append_verdict(&verdict("v3", "fail_eval", "p")).unwrap_err(),
            EvidenceError::CapsuleNotAFailure("fail_eval".to_string())
        );
        assert_eq!(
            store.append_verdict(&verdict("v4", "ghost", "p")).unwrap_err(),
            EvidenceError::UnknownCapsule("ghost".to_string())
        );
        assert_eq!(
            store.append_verdict(&verdict("v1", "fail_train", "p")).unwrap_err(),
            EvidenceError::DuplicateId("v1".to_string())
        );
    }

    #[test]
    fn contribution_arithmetic_and_degenerate() {
        let store = open_with_round();
        for i in 0..60 {
            store.append_capsule(&capsule(&format!("s{i}"), "t", Some("sk"), Split::Train, 0, true)).unwrap();
        }
        for i in 0..40 {
            store.append_capsule(&capsule(&format!("f{i}"), "t", Some("sk"), Split::Eval, 0, false)).unwrap();
        }
        let stats = store.contribution_stats("sk").unwrap();
        assert_eq!((stats.trials, stats.successes, stats.failures), (100, 60, 40));
        assert!((stats.c_hat.unwrap() - 0.20).abs() < 1e-12);

        let empty = store.contribution_stats("unknown").unwrap();
        assert_eq!(empty.trials, 0);
        assert_eq!(empty.c_hat, None);
    }

    #[test]
    fn contribution_matches_brute_force_recount() {
        let mut rng = crate::util::derived_rng(77, "contribution-oracle", &[]);
        let store = open_with_round();
        let skills = ["a", "b", "c", "d"];
        let mut shadow: std::collections::HashMap<String, (u64, u64)> = Default::default();
        let n = rng.random_range(100..500);
        for i in 0..n {
            let skill = if rng.random_bool(0.8) {
                Some(skills[rng.random_range(0..skills.len())])
            } else {
                None
            };
            let passed = rng.random_bool(0.5);
            let split = if rng.random_bool(0.5) { Split::Train } else { Split::Eval };
            store.append_capsule(&capsule(&format!("c{i}"), "t", skill, split, 0, passed)).unwrap();
            if let Some(s) = skill {
                let e = shadow.entry(s.to_string()).or_insert((0, 0));
                e.0 += 1;
                if passed {
                    e.1 += 1;
                }
            }
        }
        for s in skills {
            let got = store.contribution_stats(s).unwrap();
            let (trials, successes) = shadow.get(s).copied().unwrap_or((0, 0));
            let want = make_stats(s, trials, successes);
            assert_eq!(got, want);
            assert_eq!(got.trials, got.successes + got.failures);
        }
    }

    #[test]
    fn window_selection() {
        let store = open_with_round();
        for round in 0..=10u32 {
            let cid = format!("c{round}");
            store.append_capsule(&capsule(&cid, "t", Some("s"), Split::Train, round, false)).unwrap();
            store.append_verdict(&verdict(&format!("v{round}"), &cid, "p")).unwrap();
        }
        let rounds = |w: u32, at: u32| -> Vec<u32> {
            store
                .verdicts_in_window(at, w)
                .unwrap()
                .into_iter()
                .map(|(_, c)| c.round)
                .collect()
        };
        assert_eq!(rounds(6, 10), vec![5, 6, 7, 8, 9, 10]);
        assert_eq!(rounds(1, 10), vec![10]);
        // clipped at zero
        assert_eq!(rounds(6, 3), vec![0, 1, 2, 3]);
    }

    #[test]
    fn bulk_appends_match_shadow_per_round_counts() {
        let store = open_with_round();
        let per_round = 100u32;
        let rounds = 100u32;
        for round in 0..rounds {
            for i in 0..per_round {
                store
                    .append_capsule(&capsule(&format!("c-{round}-{i}"), "t", None, Split::Train, round, true))
                    .unwrap();
            }
        }
        for round in 0..rounds {
            assert_eq!(store.capsule_rows(round).unwrap().len() as u32, per_round);
        }
        assert_eq!(store.dump_records().unwrap().len() as u32, rounds * per_round);
    }

    #[test]
    fn replaying_the_dump_reproduces_contribution() {
        let store = open_with_round();
        for i in 0..50 {
            store
                .append_capsule(&capsule(&format!("c{i}"), "t", Some("sk"), Split::Train, 0, i % 3 == 0))
                .unwrap();
        }
        let before = store.contribution_stats("sk").unwrap();
        let fresh = EvidenceStore::open_memory().unwrap();
        fresh.begin_round().unwrap();
        for line in store.dump_records().unwrap() {
            let v: serde_json::Value = serde_json::from_str(&line).unwrap();
            if v["type"] == "capsule" {
                let c: Capsule = serde_json::from_value(v).unwrap();
                fresh.append_capsule(&c).unwrap();
            }
        }
        assert_eq!(fresh.contribution_stats("sk").unwrap(), before);
        // identical streams chain to identical hashes
        assert_eq!(fresh.current_log_hash(), store.current_log_hash());
    }

    #[test]
    fn abort_discards_partial_round() {
        let store = EvidenceStore::open_memory().unwrap();
        store.begin_round().unwrap();
        store.append_capsule(&capsule("keep", "t", None, Split::Eval, 0, true)).unwrap();
        store.commit_round(0, "{}", 1, 0, 0).unwrap();
        let committed_hash = store.current_log_hash();

        store.begin_round().unwrap();
        store.append_capsule(&capsule("drop", "t", None, Split::Eval, 1, true)).unwrap();
        store.abort_round().unwrap();

        assert!(store.read_capsule("drop").unwrap().is_none());
        assert_eq!(store.current_log_hash(), committed_hash);
        assert_eq!(store.max_committed_round().unwrap(), Some(0));
    }

    #[test]
    fn prefix_hash_verifies_across_rounds() {
        let store = EvidenceStore::open_memory().unwrap();
        for round in 0..3 {
            store.begin_round().unwrap();
            let cid = format!("c{round}");
            store.append_capsule(&capsule(&cid, "t", Some("s"), Split::Train, round, false)).unwrap();
            store.append_verdict(&verdict(&format!("v{round}"), &cid, "p")).unwrap();
            store.commit_round(round, "{}", 1, 1, 0).unwrap();
        }
        assert_eq!(store.verify_prefix_hashes().unwrap(), 3);
    }
}
