//! Synthesis: windowed failure verdicts are canonicalized, clustered by
//! pattern, screened by the cover-guard, and turned into new ACTIVE skills
//! through the synthesis oracle, with validation, resynthesis on budget
//! overshoot, and bank-dedup on the way in. Also owns the slower-cadence
//! meta-skill refresh.

use chrono::{DateTime, Utc};

use crate::backends::{Embedder, OracleError, SynthOracle, SynthRequest};
use crate::bank::Bank;
use crate::evidence::{Capsule, Verdict};
use crate::meta::{parse_meta_skill, MetaSkill, MetaStatus};
use crate::retrieval::{canonicalize, is_bank_duplicate, is_covered, CoverSurface, RetrievalError};
use crate::skill::{validate_skill, Skill, SkillStatus, ValidationError};

/// Verdicts sharing one canonical pattern, with their capsules.
#[derive(Debug, Clone)]
pub struct FailureCluster {
    pub canonical_pattern: String,
    pub verdicts: Vec<Verdict>,
    pub capsules: Vec<Capsule>,
    pub size: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthesisBudget {
    pub max_skills_per_round: u32,
    pub char_budget: usize,
    pub resynth_retries: u32,
}

/// Knobs the synthesis pass reads beyond the budget.
#[derive(Debug, Clone, Copy)]
pub struct SynthPolicy {
    pub cover_guard_enabled: bool,
    pub cover_threshold: f64,
    pub cover_surface: CoverSurface,
    pub dedup_threshold: f64,
    pub capsule_excerpt_cap: usize,
}

/// What one synthesis pass did, for logging and reconciliation.
#[derive(Debug, Default)]
pub struct SynthOutcome {
    /// Skills promoted to ACTIVE in the bank (born).
    pub promoted: Vec<Skill>,
    /// Clusters skipped because an active skill already covers them.
    pub skipped_covered: Vec<String>,
    /// Validated candidates rejected as bank duplicates before entry.
    pub rejected_duplicates: Vec<Skill>,
    /// Oracle invocations, including resynthesis attempts.
    pub synth_calls: u64,
    /// Per-cluster failures that were logged and skipped.
    pub failures: Vec<String>,
}

/// Group windowed verdicts by canonical pattern. Only clusters of at least
/// `min_size` survive, ordered by size descending with ties going to the
/// pattern seen earliest in the window.
pub fn build_clusters(
    window: &[(Verdict, Capsule)],
    tau_canon: f64,
    min_size: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<FailureCluster>, RetrievalError> {
    let patterns: Vec<String> = window.iter().map(|(v, _)| v.pattern.clone()).collect();
    let map = canonicalize(&patterns, tau_canon, embedder)?;

    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::BTreeMap<String, FailureCluster> = Default::default();
    for (verdict, capsule) in window {
        let canon = map.canonical(&verdict.pattern).to_string();
        if !grouped.contains_key(&canon) {
            order.push(canon.clone());
            grouped.insert(
                canon.clone(),
                FailureCluster {
                    canonical_pattern: canon.clone(),
                    verdicts: Vec::new(),
                    capsules: Vec::new(),
                    size: 0,
                },
            );
        }
        let cluster = grouped.get_mut(&canon).expect("just inserted");
        cluster.verdicts.push(verdict.clone());
        cluster.capsules.push(capsule.clone());
        cluster.size += 1;
    }

    let mut clusters: Vec<FailureCluster> = Vec::new();
    for canon in &order {
        let cluster = grouped.remove(canon).expect("grouped by construction");
        if cluster.size >= min_size {
            clusters.push(cluster);
        }
    }
    // `order` position is the tie-breaker: first appearance in the window
    let age_of = |p: &str| order.iter().position(|o| o == p).expect("pattern is in order");
    clusters.sort_by(|a, b| {
        b.size
            .cmp(&a.size)
            .then_with(|| age_of(&a.canonical_pattern).cmp(&age_of(&b.canonical_pattern)))
    });
    Ok(clusters)
}

fn truncate_chars(s: &str, cap: usize) -> String {
    if s.chars().count() <= cap {
        return s.to_string();
    }
    s.chars().take(cap).collect()
}

fn cluster_digest(cluster: &FailureCluster, excerpt_cap: usize) -> String {
    let mut out = format!("pattern: {}\n", cluster.canonical_pattern);
    for (v, c) in cluster.verdicts.iter().zip(&cluster.capsules) {
        out.push_str(&format!(
            "- task {} | attribution {:?} | failure: {}\n",
            c.task_id,
            v.attribution,
            truncate_chars(&c.solver_output, excerpt_cap)
        ));
    }
    out
}

fn bank_digest(bank: &Bank) -> String {
    bank.with_status(SkillStatus::Active)
        .iter()
        .map(|s| format!("{}: {}", s.id, s.intent))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Iterate clusters in order and promote up to `max_skills_per_round` new
/// skills. Per-cluster failures (validation, exhausted resynthesis, dedup)
/// are recorded and skipped; only an unavailable oracle or embedder aborts.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_round(
    clusters: &[FailureCluster],
    meta: Option<&MetaSkill>,
    bank: &mut Bank,
    budget: &SynthesisBudget,
    policy: &SynthPolicy,
    oracle: &dyn SynthOracle,
    embedder: &dyn Embedder,
    now: DateTime<Utc>,
) -> Result<SynthOutcome, OracleError> {
    let mut outcome = SynthOutcome::default();
    let guidance_text = meta.map(|m| m.authoring_text().to_string()).unwrap_or_default();

    for cluster in clusters {
        if outcome.promoted.len() as u32 >= budget.max_skills_per_round {
            break;
        }
        if policy.cover_guard_enabled {
            let active = bank.active();
            match is_covered(
                &cluster.canonical_pattern,
                &active,
                policy.cover_threshold,
                policy.cover_surface,
                embedder,
            ) {
                Ok(true) => {
                    outcome.skipped_covered.push(cluster.canonical_pattern.clone());
                    continue;
                }
                Ok(false) => {}
                Err(RetrievalError::Oracle(e)) => return Err(e),
                Err(e) => return Err(OracleError::Unavailable(e.to_string())),
            }
        }

        let digest = cluster_digest(cluster, policy.capsule_excerpt_cap);
        let bank_dig = bank_digest(bank);
        let mut skill: Option<Skill> = None;
        for attempt in 1..=(1 + budget.resynth_retries) {
            let req = SynthRequest {
                authoring_guidance: &guidance_text,
                canonical_pattern: &cluster.canonical_pattern,
                cluster_digest: &digest,
                bank_digest: &bank_dig,
                char_budget: budget.char_budget,
                attempt,
            };
            outcome.synth_calls += 1;
            let yaml = oracle.synthesize(&req)?;
            match validate_skill(&yaml, budget.char_budget, now) {
                Ok(mut s) => {
                    s.version = format!("v{attempt}");
                    skill = Some(s);
                    break;
                }
                Err(ValidationError::OverBudget { actual, budget: b }) => {
                    outcome.failures.push(format!(
                        "cluster {:?} attempt {attempt}: over budget ({actual} > {b})",
                        cluster.canonical_pattern
                    ));
                    continue;
                }
                Err(e) => {
                    outcome
                        .failures
                        .push(format!("cluster {:?}: {e}", cluster.canonical_pattern));
                    break;
                }
            }
        }
        let Some(mut skill) = skill else { continue };

        skill.id = bank.unique_id(&skill.id);
        skill.embedding = Some(embedder.embed_one(&skill.embedding_surface())?);

        let live = bank.live();
        match is_bank_duplicate(&skill, &live, policy.dedup_threshold) {
            Ok(true) => {
                outcome.rejected_duplicates.push(skill);
                continue;
            }
            Ok(false) => {}
            Err(RetrievalError::Oracle(e)) => return Err(e),
            Err(e) => return Err(OracleError::Unavailable(e.to_string())),
        }

        skill.status = SkillStatus::Active;
        bank.insert(skill.clone()).expect("unique_id precludes collisions");
        outcome.promoted.push(skill);
    }
    Ok(outcome)
}

pub enum MetaRefresh {
    Unchanged,
    Refreshed(MetaSkill),
}

fn verdict_digest(window: &[(Verdict, Capsule)]) -> String {
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for (v, _) in window {
        *counts.entry(v.pattern.as_str()).or_insert(0) += 1;
    }
    counts
        .iter()
        .map(|(p, n)| format!("{n}x {p}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Slower-cadence meta-skill rewrite. Disabled cadence always leaves the
/// meta unchanged; at rounds divisible by the cadence the oracle rewrites
/// the authoring prior, and the result is accepted only if it parses, keeps
/// the suite, and preserves the schema lock. Oracle failure degrades to
/// UNCHANGED with a warning rather than aborting the round.
pub fn meta_synthesize(
    window: &[(Verdict, Capsule)],
    current: &MetaSkill,
    cadence: Option<u32>,
    round: u32,
    oracle: &dyn SynthOracle,
) -> (MetaRefresh, Option<String>) {
    let Some(k) = cadence else { return (MetaRefresh::Unchanged, None) };
    if k == 0 || round == 0 || round % k != 0 {
        return (MetaRefresh::Unchanged, None);
    }
    let digest = verdict_digest(window);
    let markdown = match oracle.rewrite_meta(current.render(), &digest) {
        Ok(md) => md,
        Err(e) => {
            return (
                MetaRefresh::Unchanged,
                Some(format!("meta refresh at round {round} failed: {e}")),
            )
        }
    };
    match parse_meta_skill(&markdown) {
        Ok(mut meta) => {
            if meta.suite != current.suite {
                return (
                    MetaRefresh::Unchanged,
                    Some(format!(
                        "meta refresh at round {round} changed suite {:?} -> {:?}; rejected",
                        current.suite, meta.suite
                    )),
                );
            }
            if !meta.preserves_schema_lock() {
                return (
                    MetaRefresh::Unchanged,
                    Some(format!("meta refresh at round {round} broke the schema lock; rejected")),
                );
            }
            if meta.id == current.id {
                meta.id = format!("{}_r{round}", current.id);
            }
            meta.status = MetaStatus::Active;
            (MetaRefresh::Refreshed(meta), None)
        }
        Err(e) => (
            MetaRefresh::Unchanged,
            Some(format!("meta refresh at round {round} unparseable: {e}")),
        ),
    }
}
