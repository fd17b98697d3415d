//! Oracle interfaces and their implementations. The engine is generic over
//! six pluggable roles — solver, grader, critic, synthesizer, router gate,
//! and embedder — with three backends: a deterministic simulated world
//! ([`sim`]), table-driven scripted doubles ([`scripted`]), and a remote
//! HTTP model endpoint ([`remote`]).

pub mod remote;
pub mod scripted;
pub mod sim;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::{Capsule, Split};
use crate::retrieval::EmbeddingVector;
use crate::skill::Skill;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("oracle unavailable: {0}")]
    Unavailable(String),
    #[error("oracle call timed out")]
    Timeout,
    #[error("oracle rate limited")]
    RateLimited,
    #[error("malformed oracle response: {0}")]
    MalformedResponse(String),
}

/// One task in a suite. Splits are fixed for the lifetime of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub prompt: String,
    pub split: Split,
    pub suite: String,
}

/// A task suite with fixed train/eval splits. Tasks are kept sorted by id so
/// phase iteration order is deterministic.
#[derive(Debug, Clone, Default)]
pub struct TaskSuite {
    tasks: Vec<Task>,
}

impl TaskSuite {
    pub fn new(mut tasks: Vec<Task>) -> Self {
        tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        TaskSuite { tasks }
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Task> {
        self.tasks.iter().filter(move |t| t.split == split)
    }

    pub fn suite_name(&self) -> &str {
        self.tasks.first().map(|t| t.suite.as_str()).unwrap_or("default")
    }
}

/// Deterministic context threaded into each solver call so simulated
/// backends can derive per-call randomness independent of scheduling.
#[derive(Debug, Clone, Copy)]
pub struct SolveContext {
    pub run_seed: u64,
    pub round: u32,
    pub split: Split,
}

pub trait SolverOracle: Send + Sync {
    fn solve(
        &self,
        task: &Task,
        skill: Option<&Skill>,
        ctx: &SolveContext,
    ) -> Result<String, OracleError>;
}

pub trait GraderOracle: Send + Sync {
    fn grade(&self, task: &Task, output: &str) -> Result<bool, OracleError>;
}

/// What a critic proposes for one failed capsule; the engine validates it
/// before an actual Verdict is appended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictDraft {
    pub attribution: crate::evidence::Attribution,
    pub pattern: String,
    pub confidence: crate::evidence::Confidence,
    pub reason: String,
}

pub trait CriticOracle: Send + Sync {
    fn critique(
        &self,
        capsule: &Capsule,
        task: &Task,
        skill: Option<&Skill>,
    ) -> Result<VerdictDraft, OracleError>;
}

/// Inputs for one synthesis call.
#[derive(Debug, Clone)]
pub struct SynthRequest<'a> {
    pub authoring_guidance: &'a str,
    pub canonical_pattern: &'a str,
    pub cluster_digest: &'a str,
    pub bank_digest: &'a str,
    pub char_budget: usize,
    /// 1-based attempt counter; > 1 means a resynthesis after OverBudget.
    pub attempt: u32,
}

pub trait SynthOracle: Send + Sync {
    fn synthesize(&self, req: &SynthRequest) -> Result<String, OracleError>;

    /// Rewrite the meta-skill markdown from a digest of recent verdicts.
    /// Backends without this capability leave the meta unchanged upstream.
    fn rewrite_meta(&self, _current: &str, _digest: &str) -> Result<String, OracleError> {
        Err(OracleError::Unavailable("meta rewrite not supported".to_string()))
    }
}

/// One candidate shown to the router gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateCandidate {
    pub id: String,
    pub intent: String,
    pub guidance: String,
}

pub trait GateOracle: Send + Sync {
    /// Return the id of exactly one candidate, or None for the no-skill
    /// route. Ids outside the candidate set count as malformed output.
    fn adjudicate(
        &self,
        task_text: &str,
        candidates: &[GateCandidate],
    ) -> Result<Option<String>, OracleError>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, OracleError>;

    fn dim(&self) -> usize;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, OracleError> {
        let mut v = self.embed(std::slice::from_ref(&text.to_string()))?;
        Ok(v.remove(0))
    }
}

/// The full oracle set a run plugs in.
#[derive(Clone)]
pub struct Oracles {
    pub solver: Arc<dyn SolverOracle>,
    pub grader: Arc<dyn GraderOracle>,
    pub critic: Arc<dyn CriticOracle>,
    pub synth: Arc<dyn SynthOracle>,
    pub gate: Arc<dyn GateOracle>,
    pub embedder: Arc<dyn Embedder>,
}
