//! Scripted oracles: table-driven doubles with no model and no randomness.
//! A script is a JSON document (loadable by the CLI, or built in tests)
//! giving per-(task, round) solver outcomes, critic patterns, and gate
//! decisions keyed by (task_id, candidate-set hash).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{
    CriticOracle, GateCandidate, GateOracle, GraderOracle, OracleError, Oracles, SolveContext,
    SolverOracle, SynthOracle, SynthRequest, Task, VerdictDraft,
};
use crate::backends::sim::{template_skill_yaml, NgramEmbedder};
use crate::evidence::{Attribution, Capsule, Confidence};
use crate::skill::Skill;
use crate::util::stable_hash64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOverride {
    pub task_id: String,
    /// Absent round applies to every round.
    pub round: Option<u32>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticOverride {
    pub task_id: String,
    pub pattern: String,
}

/// One gate decision: `choose` must name a candidate id, or be absent for
/// NONE. The decision is keyed by task id plus the hash of the candidate
/// id set, so a test can pin "for this task, facing exactly these skills".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRule {
    pub task_id: String,
    /// Hex hash of the sorted candidate id set; absent matches any set.
    pub candidates_hash: Option<String>,
    pub choose: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDefault {
    None,
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Script {
    /// The task suite scripted runs execute against.
    pub tasks: Vec<Task>,
    pub default_pass: bool,
    pub solver_overrides: Vec<SolverOverride>,
    pub default_pattern: String,
    pub critic_overrides: Vec<CriticOverride>,
    pub gate_rules: Vec<GateRule>,
    pub gate_default: GateDefault,
    pub embed_seed: u64,
}

impl Default for Script {
    fn default() -> Self {
        Script {
            tasks: Vec::new(),
            default_pass: true,
            solver_overrides: Vec::new(),
            default_pattern: "scripted failure pattern".to_string(),
            critic_overrides: Vec::new(),
            gate_rules: Vec::new(),
            gate_default: GateDefault::First,
            embed_seed: 17,
        }
    }
}

impl Script {
    pub fn load(path: &Path) -> Result<Script, OracleError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OracleError::Unavailable(format!("script {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| OracleError::MalformedResponse(format!("script: {e}")))
    }
}

/// Hex hash of a candidate id set, order-independent.
pub fn candidate_set_hash(ids: &[String]) -> String {
    let mut sorted: Vec<&str> = ids.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    let parts: Vec<&[u8]> = sorted.iter().map(|s| s.as_bytes()).collect();
    format!("{:016x}", stable_hash64(&parts))
}

pub struct ScriptedSolver {
    by_task_round: BTreeMap<(String, Option<u32>), bool>,
    default_pass: bool,
}

impl SolverOracle for ScriptedSolver {
    fn solve(
        &self,
        task: &Task,
        skill: Option<&Skill>,
        ctx: &SolveContext,
    ) -> Result<String, OracleError> {
        let passed = self
            .by_task_round
            .get(&(task.task_id.clone(), Some(ctx.round)))
            .or_else(|| self.by_task_round.get(&(task.task_id.clone(), None)))
            .copied()
            .unwrap_or(self.default_pass);
        let with = skill.map(|s| format!(" with={}", s.id)).unwrap_or_default();
        Ok(if passed {
            format!("PASS scripted {}{with}", task.task_id)
        } else {
            format!("FAIL scripted {}{with}", task.task_id)
        })
    }
}

pub struct ScriptedGrader;

impl GraderOracle for ScriptedGrader {
    fn grade(&self, _task: &Task, output: &str) -> Result<bool, OracleError> {
        Ok(output.starts_with("PASS"))
    }
}

pub struct ScriptedCritic {
    by_task: BTreeMap<String, String>,
    default_pattern: String,
}

impl CriticOracle for ScriptedCritic {
    fn critique(
        &self,
        _capsule: &Capsule,
        task: &Task,
        skill: Option<&Skill>,
    ) -> Result<VerdictDraft, OracleError> {
        let pattern = self
            .by_task
            .get(&task.task_id)
            .cloned()
            .unwrap_or_else(|| self.default_pattern.clone());
        Ok(VerdictDraft {
            attribution: if skill.is_some() { Attribution::Neutral } else { Attribution::Inapplicable },
            pattern,
            confidence: Confidence::Medium,
            reason: "scripted".to_string(),
        })
    }
}

/// Decision-table gate keyed by (task_id, candidate set hash).
pub struct ScriptedGate {
    rules: Vec<GateRule>,
    default: GateDefault,
}

impl GateOracle for ScriptedGate {
    fn adjudicate(
        &self,
        task_text: &str,
        candidates: &[GateCandidate],
    ) -> Result<Option<String>, OracleError> {
        // scripted suites set prompt == task_id
        let ids: Vec<String> = candidates.iter().map(|c| c.id.clone()).collect();
        let hash = candidate_set_hash(&ids);
        for rule in &self.rules {
            if rule.task_id != task_text {
                continue;
            }
            if let Some(expect) = &rule.candidates_hash {
                if *expect != hash {
                    continue;
                }
            }
            return Ok(rule.choose.clone());
        }
        Ok(match self.default {
            GateDefault::None => None,
            GateDefault::First => candidates.first().map(|c| c.id.clone()),
        })
    }
}

/// Template-fills a valid skill from the cluster's canonical pattern.
pub struct ScriptedSynth;

impl SynthOracle for ScriptedSynth {
    fn synthesize(&self, req: &SynthRequest) -> Result<String, OracleError> {
        Ok(template_skill_yaml(req.canonical_pattern, 0))
    }
}

pub fn scripted_oracles(script: &Script) -> Oracles {
    let by_task_round = script
        .solver_overrides
        .iter()
        .map(|o| ((o.task_id.clone(), o.round), o.passed))
        .collect();
    let by_task = script
        .critic_overrides
        .iter()
        .map(|o| (o.task_id.clone(), o.pattern.clone()))
        .collect();
    Oracles {
        solver: Arc::new(ScriptedSolver { by_task_round, default_pass: script.default_pass }),
        grader: Arc::new(ScriptedGrader),
        critic: Arc::new(ScriptedCritic {
            by_task,
            default_pattern: script.default_pattern.clone(),
        }),
        synth: Arc::new(ScriptedSynth),
        gate: Arc::new(ScriptedGate {
            rules: script.gate_rules.clone(),
            default: script.gate_default.clone(),
        }),
        embedder: Arc::new(NgramEmbedder::new(script.embed_seed)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::Split;

    fn task(id: &str) -> Task {
        Task { task_id: id.to_string(), prompt: id.to_string(), split: Split::Train, suite: "s".into() }
    }

    #[test]
    fn solver_overrides_by_round_then_task() {
        let script = Script {
            default_pass: true,
            solver_overrides: vec![
                SolverOverride { task_id: "t1".into(), round: Some(2), passed: false },
                SolverOverride { task_id: "t2".into(), round: None, passed: false },
            ],
            ..Default::default()
        };
        let oracles = scripted_oracles(&script);
        let ctx = |round| SolveContext { run_seed: 0, round, split: Split::Train };
        let grade = |out: &str| out.starts_with("PASS");
        assert!(grade(&oracles.solver.solve(&task("t1"), None, &ctx(0)).unwrap()));
        assert!(!grade(&oracles.solver.solve(&task("t1"), None, &ctx(2)).unwrap()));
        assert!(!grade(&oracles.solver.solve(&task("t2"), None, &ctx(9)).unwrap()));
        assert!(grade(&oracles.solver.solve(&task("t3"), None, &ctx(0)).unwrap()));
    }

    #[test]
    fn gate_table_keys_on_task_and_candidate_set() {
        let mk = |id: &str| GateCandidate {
            id: id.to_string(),
            intent: String::new(),
            guidance: String::new(),
        };
        let set_ab = candidate_set_hash(&["a".into(), "b".into()]);
        let script = Script {
            gate_rules: vec![
                GateRule {
                    task_id: "t1".into(),
                    candidates_hash: Some(set_ab.clone()),
                    choose: Some("b".into()),
                },
                GateRule { task_id: "t2".into(), candidates_hash: None, choose: None },
            ],
            gate_default: GateDefault::First,
            ..Default::default()
        };
        let oracles = scripted_oracles(&script);
        // exact (task, set) match
        let got = oracles.gate.adjudicate("t1", &[mk("a"), mk("b")]).unwrap();
        assert_eq!(got.as_deref(), Some("b"));
        // same task, different set → default (first)
        let got = oracles.gate.adjudicate("t1", &[mk("a"), mk("c")]).unwrap();
        assert_eq!(got.as_deref(), Some("a"));
        // rule with no hash matches any set; chooses NONE
        assert_eq!(oracles.gate.adjudicate("t2", &[mk("a")]).unwrap(), None);
        // hash is order independent
        assert_eq!(candidate_set_hash(&["b".into(), "a".into()]), set_ab);
    }

    #[test]
    fn script_round_trips_through_json() {
        let script = Script {
            solver_overrides: vec![SolverOverride { task_id: "x".into(), round: Some(1), passed: false }],
            ..Default::default()
        };
        let text = serde_json::to_string(&script).unwrap();
        assert_eq!(serde_json::from_str::<Script>(&text).unwrap(), script);
    }
}
