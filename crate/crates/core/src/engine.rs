//! The round loop. Each round runs five phases in a fixed order — eval pass,
//! train pass, critic, synthesizer, curator — then the optional meta refresh,
//! the post-curate bank snapshot, and the rollback check. A round is one
//! store transaction: an oracle failure aborts it, the bank reverts to the
//! round's start, and nothing partial is ever committed.
//!
//! Within the eval/train phases, per-task work (route → solve → grade) may
//! run on a thread pool; capsules are appended afterwards in task-id order,
//! and every random draw in the simulated backends is derived from
//! (run seed, round, split, task), so parallelism never changes outcomes.

use chrono::{DateTime, TimeZone, Timelike, Utc};
use rayon::prelude::*;
use thiserror::Error;

use crate::backends::{Oracles, SolveContext, Task, TaskSuite};
use crate::bank::{Bank, BankError};
use crate::config::{ConfigError, RunConfig};
use crate::curator::{enforce_cap, retirement_pass, CuratorConfig};
use crate::evidence::{Capsule, EvidenceError, EvidenceStore, Split, Verdict};
use crate::meta::{default_meta_skill, MetaRegistry};
use crate::report::{peak, rolling_gain, RoundResult, RunReport, RunSummary};
use crate::retrieval::RetrievalError;
use crate::router::{route, RouteDecision, RouterError, RouterMode};
use crate::skill::{Skill, SkillStatus};
use crate::synth::{
    build_clusters, meta_synthesize, synthesize_round, MetaRefresh, SynthPolicy, SynthesisBudget,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Oracle(#[from] crate::backends::OracleError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("engine state error: {0}")]
    State(String),
}

/// Time source for record timestamps. The logical clock makes seeded runs
/// byte-reproducible; the system clock is for live backends.
#[derive(Debug, Clone)]
pub enum Clock {
    Logical { next: DateTime<Utc> },
    System,
}

impl Clock {
    pub fn logical() -> Clock {
        Clock::Logical { next: Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap() }
    }

    pub fn system() -> Clock {
        Clock::System
    }

    pub fn tick(&mut self) -> DateTime<Utc> {
        match self {
            Clock::Logical { next } => {
                let now = *next;
                *next += chrono::Duration::seconds(1);
                now
            }
            Clock::System => {
                let now = Utc::now();
                now.with_nanosecond(0).unwrap_or(now)
            }
        }
    }
}

/// The rollback automaton: a round counts as a regression iff its eval
/// pass rate falls strictly below best − τ_rb; `persistence` consecutive
/// regressions fire a restore of the best round's bank. A new best resets
/// the streak because the best updates before the comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct RollbackMonitor {
    pub best: f64,
    pub best_round: u32,
    pub streak: u32,
}

impl Default for RollbackMonitor {
    fn default() -> Self {
        RollbackMonitor { best: f64::NEG_INFINITY, best_round: 0, streak: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RollbackAction {
    None,
    Restore(u32),
}

impl RollbackMonitor {
    pub fn observe(
        &mut self,
        round: u32,
        eval_pass1: f64,
        tau_rb: f64,
        persistence: u32,
    ) -> RollbackAction {
        if eval_pass1 > self.best {
            self.best = eval_pass1;
            self.best_round = round;
        }
        if eval_pass1 < self.best - tau_rb {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= persistence {
            self.streak = 0;
            RollbackAction::Restore(self.best_round)
        } else {
            RollbackAction::None
        }
    }
}

struct TaskOutcome {
    task: Task,
    decision: RouteDecision,
    output: String,
    passed: bool,
}

pub struct Engine {
    cfg: RunConfig,
    suite: TaskSuite,
    oracles: Oracles,
    store: EvidenceStore,
    bank: Bank,
    metas: MetaRegistry,
    clock: Clock,
    seed: u64,
    round: u32,
    monitor: RollbackMonitor,
    curve: Vec<f64>,
    results: Vec<RoundResult>,
    warnings: Vec<String>,
    rollbacks: u32,
    pool: rayon::ThreadPool,
    round_solver_calls: u64,
    round_critic_calls: u64,
    round_synth_calls: u64,
}

impl Engine {
    pub fn new(
        cfg: RunConfig,
        suite: TaskSuite,
        oracles: Oracles,
        seed: u64,
        store: EvidenceStore,
        clock: Clock,
    ) -> Result<Engine, EngineError> {
        cfg.validate()?;
        if store.max_committed_round()?.is_some() {
            return Err(EngineError::State(
                "store already contains committed rounds; runs start fresh".to_string(),
            ));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism.max(1))
            .build()
            .map_err(|e| EngineError::State(e.to_string()))?;
        let mut metas = MetaRegistry::new();
        metas.register(default_meta_skill(suite.suite_name()));
        Ok(Engine {
            cfg,
            suite,
            oracles,
            store,
            bank: Bank::new(),
            metas,
            clock,
            seed,
            round: 0,
            monitor: RollbackMonitor::default(),
            curve: Vec::new(),
            results: Vec::new(),
            warnings: Vec::new(),
            rollbacks: 0,
            pool,
            round_solver_calls: 0,
            round_critic_calls: 0,
            round_synth_calls: 0,
        })
    }

    /// Seed the bank before round 0 (tests and resumed experiments).
    pub fn with_initial_bank(mut self, bank: Bank) -> Engine {
        self.bank = bank;
        self
    }

    pub fn bank(&self) -> &Bank {
        &self.bank
    }

    pub fn store(&self) -> &EvidenceStore {
        &self.store
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn curve(&self) -> &[f64] {
        &self.curve
    }

    pub fn run(&mut self) -> Result<RunReport, EngineError> {
        for _ in 0..self.cfg.rounds {
            self.run_round()?;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> RunReport {
        let counters = self
            .store
            .operational_counters(&self.bank)
            .expect("counters over a healthy store");
        let summary = RunSummary {
            seed: self.seed,
            baseline: self.curve.first().copied().unwrap_or(0.0),
            peak: peak(&self.curve).unwrap_or(0.0),
            rolling_gain: rolling_gain(&self.curve).ok(),
            final_active: counters.active,
            rollbacks: self.rollbacks,
            counters,
        };
        RunReport { seed: self.seed, rounds: self.results.clone(), summary }
    }

    pub fn run_round(&mut self) -> Result<RoundResult, EngineError> {
        let round = self.round;
        self.round_solver_calls = 0;
        self.round_critic_calls = 0;
        self.round_synth_calls = 0;
        self.store.begin_round()?;
        let bank_at_entry = self.bank.clone();
        let metas_at_entry = self.metas.clone();
        let monitor_at_entry = self.monitor.clone();
        let clock_at_entry = self.clock.clone();
        match self.round_body(round) {
            Ok(result) => {
                let result_json =
                    serde_json::to_string(&result).expect("round result serializes");
                self.store.commit_round(
                    round,
                    &result_json,
                    self.round_solver_calls,
                    self.round_critic_calls,
                    self.round_synth_calls,
                )?;
                self.round += 1;
                self.curve.push(result.eval_pass1);
                self.results.push(result.clone());
                Ok(result)
            }
            Err(e) => {
                self.store.abort_round()?;
                self.bank = bank_at_entry;
                self.metas = metas_at_entry;
                self.monitor = monitor_at_entry;
                self.clock = clock_at_entry;
                Err(e)
            }
        }
    }

    fn round_body(&mut self, round: u32) -> Result<RoundResult, EngineError> {
        // phase 1: eval pass routes only ACTIVE skills
        let eval_eligible = self.bank.active();
        let eval_outcomes = self.run_pass(Split::Eval, &eval_eligible, round)?;

        // phase 2: train pass; during bootstrap CANDIDATE skills route too
        let mut train_eligible = self.bank.active();
        for skill in self.bank.with_status(SkillStatus::Candidate) {
            let trials = self.store.contribution_stats(&skill.id)?.trials;
            if trials < self.cfg.bootstrap_trials {
                train_eligible.push(skill.clone());
            }
        }
        train_eligible.sort_by(|a, b| a.id.cmp(&b.id));
        let train_outcomes = self.run_pass(Split::Train, &train_eligible, round)?;

        // phase 3: critic verdicts on train failures (skipped entirely when
        // the router is forced to NONE: nothing is ever injected, so the
        // whole reflection path is idle by construction)
        if self.cfg.router_mode != RouterMode::ForcedNone {
            for outcome in train_outcomes.iter().filter(|o| !o.passed) {
                let capsule = self.capsule_for(round, outcome, Split::Train);
                let skill = outcome
                    .decision
                    .chosen
                    .as_deref()
                    .and_then(|id| self.bank.get(id));
                self.round_critic_calls += 1;
                let draft = match self.oracles.critic.critique(&capsule, &outcome.task, skill) {
                    Ok(draft) => draft,
                    // a garbled reply skips this verdict; only an
                    // unavailable oracle aborts the round
                    Err(crate::backends::OracleError::MalformedResponse(msg)) => {
                        self.warnings.push(format!(
                            "round {round}: critic reply for {} skipped: {msg}",
                            capsule.capsule_id
                        ));
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                if draft.pattern.trim().is_empty() {
                    self.warnings.push(format!(
                        "round {round}: critic returned an empty pattern for {}; skipped",
                        capsule.capsule_id
                    ));
                    continue;
                }
                let verdict = Verdict {
                    verdict_id: format!("v-{round}-{}", outcome.task.task_id),
                    capsule_id: capsule.capsule_id.clone(),
                    attribution: draft.attribution,
                    pattern: draft.pattern,
                    confidence: draft.confidence,
                    reason: draft.reason,
                };
                self.store.append_verdict(&verdict)?;
            }
        }

        // phase 4: synthesizer over the lookback window
        let window = self.store.verdicts_in_window(round, self.cfg.lookback_rounds)?;
        let clusters = build_clusters(
            &window,
            self.cfg.tau_canon,
            self.cfg.min_cluster_size,
            self.oracles.embedder.as_ref(),
        )?;
        let meta = if self.cfg.use_meta {
            self.metas.active_for(self.suite.suite_name()).cloned()
        } else {
            None
        };
        let budget = SynthesisBudget {
            max_skills_per_round: self.cfg.max_skills_per_round,
            char_budget: self.cfg.char_budget,
            resynth_retries: self.cfg.resynth_retries,
        };
        let policy = SynthPolicy {
            cover_guard_enabled: self.cfg.cover_guard_enabled,
            cover_threshold: self.cfg.cover_threshold,
            cover_surface: self.cfg.cover_surface,
            dedup_threshold: self.cfg.dedup_threshold,
            capsule_excerpt_cap: self.cfg.capsule_excerpt_cap,
        };
        let synth_now = self.clock.tick();
        let synth_outcome = synthesize_round(
            &clusters,
            meta.as_ref(),
            &mut self.bank,
            &budget,
            &policy,
            self.oracles.synth.as_ref(),
            self.oracles.embedder.as_ref(),
            synth_now,
        )?;
        self.round_synth_calls += synth_outcome.synth_calls;
        for skill in &synth_outcome.promoted {
            self.store.record_skill_event(
                &skill.id,
                round,
                "born",
                Some(&skill.canonical_yaml()),
                skill
                    .embedding
                    .as_ref()
                    .map(|e| serde_json::to_string(&e.0).expect("vector serializes"))
                    .as_deref(),
            )?;
        }
        for skill in &synth_outcome.rejected_duplicates {
            self.store.record_skill_event(
                &skill.id,
                round,
                "rejected_duplicate",
                Some(&skill.canonical_yaml()),
                None,
            )?;
        }
        self.warnings.extend(synth_outcome.failures.iter().cloned());

        // phase 5: curator — retirement, then cap enforcement
        let curator_cfg =
            CuratorConfig { n_min: self.cfg.n_min, tau: self.cfg.tau, cap: self.cfg.cap };
        let curate_now = self.clock.tick();
        let retired = retirement_pass(&mut self.bank, &self.store, &curator_cfg, curate_now);
        for entry in &retired.retired {
            self.store.record_skill_event(&entry.skill_id, round, "retired", None, None)?;
        }
        let evicted = enforce_cap(&mut self.bank, &self.store, self.cfg.cap, curate_now);
        for entry in &evicted.evicted {
            self.store.record_skill_event(&entry.skill_id, round, "evicted", None, None)?;
        }

        // meta refresh on its own slower cadence
        if self.cfg.use_meta {
            if let Some(current) = self.metas.active_for(self.suite.suite_name()).cloned() {
                let (refresh, warning) = meta_synthesize(
                    &window,
                    &current,
                    self.cfg.meta_cadence,
                    round,
                    self.oracles.synth.as_ref(),
                );
                if let Some(w) = warning {
                    self.warnings.push(w);
                }
                if let MetaRefresh::Refreshed(new_meta) = refresh {
                    self.round_synth_calls += 1;
                    self.metas.register(new_meta);
                }
            }
        }

        // metrics for the round
        let eval_total = eval_outcomes.len().max(1) as f64;
        let eval_pass1 = eval_outcomes.iter().filter(|o| o.passed).count() as f64 / eval_total;
        let train_total = train_outcomes.len().max(1) as f64;
        let train_pass1 = train_outcomes.iter().filter(|o| o.passed).count() as f64 / train_total;
        let engagement =
            eval_outcomes.iter().filter(|o| o.decision.chosen.is_some()).count() as f64
                / eval_total;

        // snapshot the post-curate bank, then the rollback check
        self.store.save_snapshot(
            round,
            "round",
            &self.bank.snapshot_bytes(),
            &self.bank.content_hash(),
        )?;
        let action =
            self.monitor.observe(round, eval_pass1, self.cfg.tau_rb, self.cfg.rb_persistence);
        let rollback_fired = match action {
            RollbackAction::None => false,
            RollbackAction::Restore(best_round) => {
                self.store.save_snapshot(
                    round,
                    "archive",
                    &self.bank.snapshot_bytes(),
                    &self.bank.content_hash(),
                )?;
                let (bank_json, hash) = self.store.load_snapshot(best_round, "round")?;
                let restored = Bank::from_snapshot_bytes(&bank_json)?;
                if restored.content_hash() != hash {
                    return Err(EngineError::State(format!(
                        "snapshot hash mismatch for round {best_round}"
                    )));
                }
                self.bank = restored;
                self.rollbacks += 1;
                true
            }
        };

        Ok(RoundResult {
            round,
            eval_pass1,
            train_pass1,
            skills_born: synth_outcome.promoted.len() as u32,
            skills_retired: (retired.retired.len() + evicted.evicted.len()) as u32,
            active_count: self.bank.count_with_status(SkillStatus::Active) as u32,
            router_engagement: engagement,
            rollback_fired,
        })
    }

    fn capsule_id(round: u32, split: Split, task_id: &str) -> String {
        format!("c-{round}-{}-{task_id}", split.as_str())
    }

    fn capsule_for(&self, round: u32, outcome: &TaskOutcome, split: Split) -> Capsule {
        // the capsule was appended by run_pass; rebuild the identity fields
        // the critic needs without re-reading the store
        Capsule {
            capsule_id: Self::capsule_id(round, split, &outcome.task.task_id),
            task_id: outcome.task.task_id.clone(),
            skill_id: outcome.decision.chosen.clone(),
            split,
            round,
            passed: outcome.passed,
            solver_output: outcome.output.clone(),
            created_at: DateTime::UNIX_EPOCH,
        }
    }

    fn run_pass(
        &mut self,
        split: Split,
        eligible: &[Skill],
        round: u32,
    ) -> Result<Vec<TaskOutcome>, EngineError> {
        let tasks: Vec<Task> = self.suite.split(split).cloned().collect();
        let ctx = SolveContext { run_seed: self.seed, round, split };
        let mode = self.cfg.router_mode;
        let cutoff = self.cfg.full_bank_cutoff;
        let k = self.cfg.shortlist_k;
        let oracles = self.oracles.clone();

        let outcomes: Result<Vec<TaskOutcome>, EngineError> = self.pool.install(|| {
            tasks
                .par_iter()
                .map(|task| {
                    let decision = route(
                        task,
                        eligible,
                        mode,
                        cutoff,
                        k,
                        oracles.gate.as_ref(),
                        oracles.embedder.as_ref(),
                    )?;
                    let skill = decision
                        .chosen
                        .as_deref()
                        .and_then(|id| eligible.iter().find(|s| s.id == id));
                    let output = oracles.solver.solve(task, skill, &ctx)?;
                    let passed = oracles.grader.grade(task, &output)?;
                    Ok(TaskOutcome { task: task.clone(), decision, output, passed })
                })
                .collect()
        });
        let outcomes = outcomes?;
        self.round_solver_calls += outcomes.len() as u64;

        // appends happen on the control thread, in task-id order
        for outcome in &outcomes {
            let capsule = Capsule {
                capsule_id: Self::capsule_id(round, split, &outcome.task.task_id),
                task_id: outcome.task.task_id.clone(),
                skill_id: outcome.decision.chosen.clone(),
                split,
                round,
                passed: outcome.passed,
                solver_output: outcome.output.clone(),
                created_at: self.clock.tick(),
            };
            self.store.append_capsule(&capsule)?;
        }
        Ok(outcomes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollback_monitor_matches_reference_automaton() {
        // ten-line reference implementation of the counter automaton
        fn reference(curve: &[f64], tau_rb: f64, persistence: u32) -> Vec<Option<u32>> {
            let (mut best, mut best_round, mut streak) = (f64::NEG_INFINITY, 0u32, 0u32);
            let mut fired = Vec::new();
            for (round, &eval) in curve.iter().enumerate() {
                if eval > best {
                    best = eval;
                    best_round = round as u32;
                }
                if eval < best - tau_rb {
                    streak += 1;
                } else {
                    streak = 0;
                }
                if streak >= persistence {
                    streak = 0;
                    fired.push(Some(best_round));
                } else {
                    fired.push(None);
                }
            }
            fired
        }

        use rand::Rng;
        let mut rng = crate::util::derived_rng(5, "rollback-prop", &[]);
        for case in 0..2_000 {
            let len = rng.random_range(1..60);
            let curve: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
            let want = reference(&curve, 0.10, 5);
            let mut monitor = RollbackMonitor::default();
            for (round, &eval) in curve.iter().enumerate() {
                let got = monitor.observe(round as u32, eval, 0.10, 5);
                let expect = match want[round] {
                    Some(r) => RollbackAction::Restore(r),
                    None => RollbackAction::None,
                };
                assert_eq!(got, expect, "case {case} round {round} curve {curve:?}");
            }
        }
    }

    #[test]
    fn four_regressions_then_recovery_resets() {
        let mut m = RollbackMonitor::default();
        assert_eq!(m.observe(0, 0.80, 0.10, 5), RollbackAction::None);
        for round in 1..=4 {
            assert_eq!(m.observe(round, 0.60, 0.10, 5), RollbackAction::None);
        }
        // a good round resets the streak
        assert_eq!(m.observe(5, 0.78, 0.10, 5), RollbackAction::None);
        assert_eq!(m.streak, 0);
        // five consecutive regressions fire at the fifth
        for round in 6..=9 {
            assert_eq!(m.observe(round, 0.55, 0.10, 5), RollbackAction::None);
        }
        assert_eq!(m.observe(10, 0.55, 0.10, 5), RollbackAction::Restore(0));
        assert_eq!(m.streak, 0);
    }

    #[test]
    fn regression_boundary_is_strict() {
        let mut m = RollbackMonitor::default();
        m.observe(0, 0.80, 0.10, 5);
        // exactly best − τ_rb is NOT a regression
        for round in 1..=20 {
            assert_eq!(m.observe(round, 0.70, 0.10, 5), RollbackAction::None);
            assert_eq!(m.streak, 0);
        }
        // just below is
        m.observe(21, 0.699, 0.10, 5);
        assert_eq!(m.streak, 1);
    }

    #[test]
    fn new_best_resets_streak_before_comparison() {
        let mut m = RollbackMonitor::default();
        m.observe(0, 0.50, 0.10, 5);
        for round in 1..=4 {
            m.observe(round, 0.30, 0.10, 5);
        }
        assert_eq!(m.streak, 4);
        // a new best is never a regression
        assert_eq!(m.observe(5, 0.60, 0.10, 5), RollbackAction::None);
        assert_eq!(m.streak, 0);
        assert_eq!(m.best_round, 5);
    }

    #[test]
    fn logical_clock_ticks_whole_seconds() {
        let mut clock = Clock::logical();
        let a = clock.tick();
        let b = clock.tick();
        assert_eq!(b - a, chrono::Duration::seconds(1));
        assert_eq!(a.to_rfc3339_opts(chrono::SecondsFormat::Secs, true), "2026-01-01T00:00:00Z");
    }
}
