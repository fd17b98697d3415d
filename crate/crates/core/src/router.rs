//! The router: one ACTIVE skill or none per task. Small banks go to the
//! gate whole (full-bank path, descending tf-idf order); larger banks are
//! shortlisted first. Ablation modes force NONE or bypass the gate with the
//! top retrieval hit.

use serde::{Deserialize, Serialize};

use crate::backends::{Embedder, GateCandidate, GateOracle, OracleError, Task};
use crate::retrieval::{shortlist, RetrievalError, TfIdfIndex};
use crate::skill::Skill;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouterError {
    #[error("gate unavailable: {0}")]
    GateUnavailable(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

impl From<OracleError> for RouterError {
    fn from(e: OracleError) -> Self {
        RouterError::GateUnavailable(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RouterMode {
    #[default]
    Default,
    ForcedNone,
    RetrievalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RoutePath {
    FullBank,
    Shortlist,
    ForcedNone,
    RetrievalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub task_id: String,
    pub chosen: Option<String>,
    pub path: RoutePath,
    pub shortlist: Vec<String>,
}

fn candidate_of(skill: &Skill) -> GateCandidate {
    GateCandidate {
        id: skill.id.clone(),
        intent: skill.intent.clone(),
        guidance: skill.guidance.render(),
    }
}

fn lexical_ranking(task_text: &str, skills: &[Skill]) -> Vec<(String, f64)> {
    let mut sorted: Vec<&Skill> = skills.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let docs: Vec<(String, String)> =
        sorted.iter().map(|s| (s.id.clone(), s.lexical_surface())).collect();
    TfIdfIndex::build(&docs).rank(task_text)
}

/// Ask the gate, tolerating one malformed reply (an id outside the
/// candidate set); a second malformed reply routes NONE.
fn adjudicate_with_retry(
    gate: &dyn GateOracle,
    task_text: &str,
    candidates: &[GateCandidate],
) -> Result<Option<String>, RouterError> {
    for _ in 0..2 {
        let reply = gate.adjudicate(task_text, candidates)?;
        match reply {
            None => return Ok(None),
            Some(id) if candidates.iter().any(|c| c.id == id) => return Ok(Some(id)),
            Some(_) => continue,
        }
    }
    Ok(None)
}

/// Select one skill or none for the task. `eligible` is the routable set
/// for this pass (ACTIVE skills on eval; bootstrap CANDIDATEs may join on
/// train — the caller decides).
pub fn route(
    task: &Task,
    eligible: &[Skill],
    mode: RouterMode,
    cutoff: usize,
    k: usize,
    gate: &dyn GateOracle,
    embedder: &dyn Embedder,
) -> Result<RouteDecision, RouterError> {
    let decision = |chosen, path, list| RouteDecision {
        task_id: task.task_id.clone(),
        chosen,
        path,
        shortlist: list,
    };

    match mode {
        RouterMode::ForcedNone => Ok(decision(None, RoutePath::ForcedNone, Vec::new())),
        RouterMode::RetrievalOnly => {
            if eligible.is_empty() {
                return Ok(decision(None, RoutePath::RetrievalOnly, Vec::new()));
            }
            let list = shortlist(&task.prompt, eligible, k, embedder)?;
            let ranked = lexical_ranking(&task.prompt, eligible);
            // tf-idf rank 1; all-zero lexical scores fall back to embedding rank 1
            let top = match ranked.first() {
                Some((id, score)) if *score > 0.0 => id.clone(),
                _ => {
                    let query = embedder.embed_one(&task.prompt)?;
                    let mut best: Option<(String, f64)> = None;
                    let mut sorted: Vec<&Skill> = eligible.iter().collect();
                    sorted.sort_by(|a, b| a.id.cmp(&b.id));
                    for s in sorted {
                        let v = s.embedding.as_ref().ok_or_else(|| {
                            RetrievalError::MissingEmbedding(s.id.clone())
                        })?;
                        let sim = crate::retrieval::cosine(&query, v)?;
                        if best.as_ref().is_none_or(|(_, b)| sim > *b) {
                            best = Some((s.id.clone(), sim));
                        }
                    }
                    best.expect("non-empty bank has a best hit").0
                }
            };
            Ok(decision(Some(top), RoutePath::RetrievalOnly, list))
        }
        RouterMode::Default => {
            if eligible.is_empty() {
                return Ok(decision(None, RoutePath::FullBank, Vec::new()));
            }
            if eligible.len() <= cutoff {
                // full bank, presented in descending tf-idf score order
                let ranked = lexical_ranking(&task.prompt, eligible);
                let by_id: std::collections::BTreeMap<&str, &Skill> =
                    eligible.iter().map(|s| (s.id.as_str(), s)).collect();
                let candidates: Vec<GateCandidate> =
                    ranked.iter().map(|(id, _)| candidate_of(by_id[id.as_str()])).collect();
                let presented: Vec<String> = candidates.iter().map(|c| c.id.clone()).collect();
                let chosen = adjudicate_with_retry(gate, &task.prompt, &candidates)?;
                Ok(decision(chosen, RoutePath::FullBank, presented))
            } else {
                let list = shortlist(&task.prompt, eligible, k, embedder)?;
                let by_id: std::collections::BTreeMap<&str, &Skill> =
                    eligible.iter().map(|s| (s.id.as_str(), s)).collect();
                let candidates: Vec<GateCandidate> =
                    list.iter().map(|id| candidate_of(by_id[id.as_str()])).collect();
                let chosen = adjudicate_with_retry(gate, &task.prompt, &candidates)?;
                Ok(decision(chosen, RoutePath::Shortlist, list))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::sim::NgramEmbedder;
    use crate::evidence::Split;
    use crate::skill::tests::sample_skill;
    use std::sync::Mutex;

    fn task(text: &str) -> Task {
        Task {
            task_id: "t1".to_string(),
            prompt: text.to_string(),
            split: Split::Eval,
            suite: "test".to_string(),
        }
    }

    fn skills(n: usize, embedder: &dyn Embedder) -> Vec<Skill> {
        (0..n)
            .map(|i| {
                let mut s = sample_skill();
                s.id = format!("skill_{i:02}");
                s.intent = format!("handles topic {}", i % 9);
                s.embedding = Some(embedder.embed_one(&s.embedding_surface()).unwrap());
                s
            })
            .collect()
    }

    /// Gate double that always picks the first candidate and records calls.
    struct FirstGate {
        calls: Mutex<u32>,
    }

    impl GateOracle for FirstGate {
        fn adjudicate(
            &self,
            _task_text: &str,
            candidates: &[GateCandidate],
        ) -> Result<Option<String>, OracleError> {
            *self.calls.lock().unwrap() += 1;
            Ok(candidates.first().map(|c| c.id.clone()))
        }
    }

    struct MalformedThenGood(Mutex<u32>);

    impl GateOracle for MalformedThenGood {
        fn adjudicate(
            &self,
            _t: &str,
            candidates: &[GateCandidate],
        ) -> Result<Option<String>, OracleError> {
            let mut n = self.0.lock().unwrap();
            *n += 1;
            if *n == 1 {
                Ok(Some("not_a_candidate".to_string()))
            } else {
                Ok(candidates.first().map(|c| c.id.clone()))
            }
        }
    }

    struct AlwaysMalformed;

    impl GateOracle for AlwaysMalformed {
        fn adjudicate(&self, _t: &str, _c: &[GateCandidate]) -> Result<Option<String>, OracleError> {
            Ok(Some("never_valid".to_string()))
        }
    }

    #[test]
    fn empty_bank_routes_none_in_every_mode() {
        let embedder = NgramEmbedder::new(5);
        let gate = FirstGate { calls: Mutex::new(0) };
        for mode in [RouterMode::Default, RouterMode::ForcedNone, RouterMode::RetrievalOnly] {
            let d = route(&task("x"), &[], mode, 20, 10, &gate, &embedder).unwrap();
            assert_eq!(d.chosen, None);
        }
        assert_eq!(*gate.calls.lock().unwrap(), 0);
    }

    #[test]
    fn forced_none_ignores_bank() {
        let embedder = NgramEmbedder::new(5);
        let bank = skills(50, &embedder);
        let gate = FirstGate { calls: Mutex::new(0) };
        let d = route(&task("topic 3"), &bank, RouterMode::ForcedNone, 20, 10, &gate, &embedder)
            .unwrap();
        assert_eq!(d.chosen, None);
        assert_eq!(d.path, RoutePath::ForcedNone);
        assert_eq!(*gate.calls.lock().unwrap(), 0);
    }

    #[test]
    fn cutoff_selects_path() {
        let embedder = NgramEmbedder::new(5);
        let gate = FirstGate { calls: Mutex::new(0) };
        let small = skills(20, &embedder);
        let d = route(&task("topic 3"), &small, RouterMode::Default, 20, 10, &gate, &embedder)
            .unwrap();
        assert_eq!(d.path, RoutePath::FullBank);
        assert_eq!(d.shortlist.len(), 20);

        let large = skills(21, &embedder);
        let d = route(&task("topic 3"), &large, RouterMode::Default, 20, 10, &gate, &embedder)
            .unwrap();
        assert_eq!(d.path, RoutePath::Shortlist);
        assert!(d.shortlist.len() >= 10 && d.shortlist.len() <= 20);
        assert!(d.chosen.is_some());
        assert!(d.shortlist.contains(d.chosen.as_ref().unwrap()));
    }

    #[test]
    fn retrieval_only_always_injects_on_nonempty_bank() {
        let embedder = NgramEmbedder::new(5);
        let gate = FirstGate { calls: Mutex::new(0) };
        let bank = skills(7, &embedder);
        // query with zero lexical overlap still injects via embedding rank
        let d = route(&task("zzz qqq www"), &bank, RouterMode::RetrievalOnly, 20, 10, &gate, &embedder)
            .unwrap();
        assert!(d.chosen.is_some());
        assert_eq!(d.path, RoutePath::RetrievalOnly);
        assert_eq!(*gate.calls.lock().unwrap(), 0);

        // lexical hit wins when present
        let d = route(&task("topic 4"), &bank, RouterMode::RetrievalOnly, 20, 10, &gate, &embedder)
            .unwrap();
        assert_eq!(d.chosen.as_deref(), Some("skill_04"));
    }

    #[test]
    fn malformed_gate_output_retried_once_then_none() {
        let embedder = NgramEmbedder::new(5);
        let bank = skills(3, &embedder);
        let gate = MalformedThenGood(Mutex::new(0));
        let d = route(&task("topic"), &bank, RouterMode::Default, 20, 10, &gate, &embedder).unwrap();
        assert!(d.chosen.is_some());
        assert_eq!(*gate.0.lock().unwrap(), 2);

        let d = route(&task("topic"), &bank, RouterMode::Default, 20, 10, &AlwaysMalformed, &embedder)
            .unwrap();
        assert_eq!(d.chosen, None);
    }

    #[test]
    fn gate_failure_propagates() {
        struct DownGate;
        impl GateOracle for DownGate {
            fn adjudicate(&self, _t: &str, _c: &[GateCandidate]) -> Result<Option<String>, OracleError> {
                Err(OracleError::Unavailable("offline".to_string()))
            }
        }
        let embedder = NgramEmbedder::new(5);
        let bank = skills(3, &embedder);
        let err = route(&task("x"), &bank, RouterMode::Default, 20, 10, &DownGate, &embedder)
            .unwrap_err();
        assert!(matches!(err, RouterError::GateUnavailable(_)));
    }
}
