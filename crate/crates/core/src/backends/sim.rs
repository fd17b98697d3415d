//! The simulated world: a deterministic, network-free backend that gives
//! every oracle a closed-form ground truth. Each task carries a base pass
//! probability `p0` and a planted failure mode; injecting a skill shifts the
//! pass probability by that skill's true effect, clamped to [0, 1]. The
//! simulated critic labels failures with the planted mode (optionally
//! corrupted at a configured noise rate), the synthesizer template-fills a
//! valid skill for a pattern, and the gate is retrieval-consistent: it picks
//! a candidate whose text mentions the task's mode, or routes none.
//!
//! Every random draw is keyed by `(seed, label, round, split, task)` through
//! a stable hash, so outcomes are independent of thread scheduling.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{
    CriticOracle, Embedder, GateCandidate, GateOracle, GraderOracle, OracleError, Oracles,
    SolveContext, SolverOracle, SynthOracle, SynthRequest, Task, TaskSuite, VerdictDraft,
};
use crate::bound::BoundParams;
use crate::config::{EffectGenConfig, RunConfig, WorldGenConfig};
use crate::engine::{Clock, Engine, EngineError};
use crate::evidence::{Attribution, Capsule, Confidence, EvidenceStore, Split};
use crate::meta::{parse_meta_skill, MetaSkill, MetaStatus};
use crate::report::RunReport;
use crate::retrieval::EmbeddingVector;
use crate::skill::Skill;
use crate::util::{derived_rng, splitmix64, stable_hash64};
use std::sync::Arc;

/// Distinct failure-mode labels. Deliberately low lexical overlap so the
/// canonicalizer never merges two different modes.
pub const FAILURE_MODES: [&str; 16] = [
    "unchecked boundary scan",
    "stale cache reuse",
    "greedy regex backtrack",
    "integer overflow drift",
    "missing null guard",
    "wrong sort comparator",
    "float equality trap",
    "recursion depth blowup",
    "locale dependent parsing",
    "off by one window",
    "shadowed variable mixup",
    "eager evaluation leak",
    "truncated unicode slice",
    "misread precedence rule",
    "dangling iterator reuse",
    "premature rounding loss",
];

/// Seeded random projection of character trigram counts; deterministic per
/// input, cached, and never all-zero for non-empty text.
pub struct NgramEmbedder {
    seed: u64,
    dim: usize,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
}

impl NgramEmbedder {
    pub fn new(seed: u64) -> Self {
        NgramEmbedder { seed, dim: 64, cache: Mutex::new(HashMap::new()) }
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, OracleError> {
        if let Some(hit) = self.cache.lock().unwrap().get(text) {
            return Ok(hit.clone());
        }
        let lowered: Vec<char> = format!("\u{2}{}\u{3}", text.to_lowercase()).chars().collect();
        if lowered.len() < 3 {
            return Err(OracleError::MalformedResponse(
                "embedding input too short; zero vectors are rejected".to_string(),
            ));
        }
        let mut values = vec![0.0f64; self.dim];
        for window in lowered.windows(3) {
            let gram: String = window.iter().collect();
            let h = stable_hash64(&[&self.seed.to_le_bytes(), gram.as_bytes()]);
            for (word_idx, chunk) in values.chunks_mut(64).enumerate() {
                let bits = splitmix64(h ^ (word_idx as u64).wrapping_mul(0x9e37_79b9));
                for (j, v) in chunk.iter_mut().enumerate() {
                    let sign = if (bits >> j) & 1 == 1 { 1.0 } else { -1.0 };
                    *v += sign;
                }
            }
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(OracleError::MalformedResponse(
                "embedding input produced a zero vector".to_string(),
            ));
        }
        for v in &mut values {
            *v /= norm;
        }
        let vector = EmbeddingVector(values);
        self.cache.lock().unwrap().insert(text.to_string(), vector.clone());
        Ok(vector)
    }
}

impl Embedder for NgramEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, OracleError> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// How true skill effects are assigned to newly born skills.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectGenerator {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Adversarial { magnitude: f64 },
}

impl From<EffectGenConfig> for EffectGenerator {
    fn from(cfg: EffectGenConfig) -> Self {
        match cfg {
            EffectGenConfig::Constant { value } => EffectGenerator::Constant { value },
            EffectGenConfig::Uniform { low, high } => EffectGenerator::Uniform { low, high },
            EffectGenConfig::Adversarial { magnitude } => {
                EffectGenerator::Adversarial { magnitude }
            }
        }
    }
}

impl EffectGenerator {
    fn sample(&self, key: u64) -> f64 {
        match *self {
            EffectGenerator::Constant { value } => value,
            EffectGenerator::Adversarial { magnitude } => -magnitude.abs(),
            EffectGenerator::Uniform { low, high } => {
                let unit = (splitmix64(key) >> 11) as f64 / (1u64 << 53) as f64;
                low + unit * (high - low)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTask {
    #[serde(flatten)]
    pub task: Task,
    pub p0: f64,
    pub failure_mode: String,
}

/// The world spec: tasks with ground-truth pass probabilities and failure
/// modes, plus the generator of true skill effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub seed: u64,
    pub effects: EffectGenerator,
    #[serde(default)]
    pub label_noise: f64,
    pub tasks: Vec<SimTask>,
}

impl SimWorld {
    pub fn generate(cfg: &WorldGenConfig) -> SimWorld {
        assert!(
            cfg.failure_modes >= 1 && cfg.failure_modes <= FAILURE_MODES.len(),
            "failure_modes must be in 1..={}",
            FAILURE_MODES.len()
        );
        let train_count = (cfg.tasks as f64 * cfg.train_fraction).round() as usize;
        let mut rng = derived_rng(cfg.world_seed, "world-p0", &[]);
        let tasks: Vec<SimTask> = (0..cfg.tasks)
            .map(|i| {
                let mode = FAILURE_MODES[i % cfg.failure_modes];
                let split = if i < train_count { Split::Train } else { Split::Eval };
                let task_id = format!("t{i:04}");
                SimTask {
                    task: Task {
                        task_id: task_id.clone(),
                        prompt: format!(
                            "Simulated task {task_id}: apply the standard procedure; known pitfall [mode:{mode}]"
                        ),
                        split,
                        suite: "sim".to_string(),
                    },
                    p0: rng.random_range(0.0..1.0),
                    failure_mode: mode.to_string(),
                }
            })
            .collect();
        SimWorld {
            seed: cfg.world_seed,
            effects: cfg.effects.into(),
            label_noise: cfg.label_noise,
            tasks,
        }
    }

    pub fn load(path: &Path) -> Result<SimWorld, OracleError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OracleError::Unavailable(format!("world spec {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| OracleError::MalformedResponse(format!("world spec: {e}")))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("world serializes"))
    }

    pub fn suite(&self) -> TaskSuite {
        TaskSuite::new(self.tasks.iter().map(|t| t.task.clone()).collect())
    }

    pub fn task(&self, task_id: &str) -> Option<&SimTask> {
        self.tasks.iter().find(|t| t.task.task_id == task_id)
    }

    /// True effect of a skill, fixed for the life of the world by hashing
    /// the skill id against the world seed.
    pub fn effect_of(&self, skill_id: &str) -> f64 {
        let key = stable_hash64(&[&self.seed.to_le_bytes(), b"effect", skill_id.as_bytes()]);
        self.effects.sample(key)
    }

    /// Pass probability with an optional skill injected: clamp(p0 + effect).
    pub fn pass_probability(&self, task_id: &str, skill_id: Option<&str>) -> f64 {
        let base = self.task(task_id).map(|t| t.p0).unwrap_or(0.0);
        let effect = skill_id.map(|s| self.effect_of(s)).unwrap_or(0.0);
        (base + effect).clamp(0.0, 1.0)
    }

    pub fn mean_p0(&self, split: Split) -> f64 {
        let subset: Vec<f64> =
            self.tasks.iter().filter(|t| t.task.split == split).map(|t| t.p0).collect();
        if subset.is_empty() {
            0.0
        } else {
            subset.iter().sum::<f64>() / subset.len() as f64
        }
    }

    /// One-sigma noise of the rolling-gain statistic for a static
    /// (no-skill) bank: gain = mean(last 10) − mean(first 10) of per-round
    /// eval means, each round an independent Bernoulli sample per task.
    pub fn gain_noise_floor(&self) -> f64 {
        let evals: Vec<f64> =
            self.tasks.iter().filter(|t| t.task.split == Split::Eval).map(|t| t.p0).collect();
        let n = evals.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let var_round = evals.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (n * n);
        (2.0 * var_round / 10.0).sqrt()
    }
}

fn mode_marker(prompt: &str) -> Option<&str> {
    let start = prompt.find("[mode:")? + "[mode:".len();
    let end = prompt[start..].find(']')? + start;
    Some(&prompt[start..end])
}

pub struct SimSolver {
    world: Arc<SimWorld>,
}

impl SolverOracle for SimSolver {
    fn solve(
        &self,
        task: &Task,
        skill: Option<&Skill>,
        ctx: &SolveContext,
    ) -> Result<String, OracleError> {
        let p = self.world.pass_probability(&task.task_id, skill.map(|s| s.id.as_str()));
        let mut rng = derived_rng(
            ctx.run_seed,
            "solve",
            &[
                &ctx.round.to_le_bytes(),
                ctx.split.as_str().as_bytes(),
                task.task_id.as_bytes(),
            ],
        );
        let passed = rng.random_range(0.0..1.0) < p;
        let mode = self
            .world
            .task(&task.task_id)
            .map(|t| t.failure_mode.clone())
            .unwrap_or_default();
        if passed {
            Ok(format!("PASS {} round={}", task.task_id, ctx.round))
        } else {
            Ok(format!("FAIL mode={mode} task={} round={}", task.task_id, ctx.round))
        }
    }
}

pub struct SimGrader;

impl GraderOracle for SimGrader {
    fn grade(&self, _task: &Task, output: &str) -> Result<bool, OracleError> {
        Ok(output.starts_with("PASS"))
    }
}

pub struct SimCritic {
    world: Arc<SimWorld>,
}

impl CriticOracle for SimCritic {
    fn critique(
        &self,
        capsule: &Capsule,
        task: &Task,
        skill: Option<&Skill>,
    ) -> Result<VerdictDraft, OracleError> {
        let sim_task = self
            .world
            .task(&task.task_id)
            .ok_or_else(|| OracleError::MalformedResponse(format!("unknown task {}", task.task_id)))?;
        let mut pattern = sim_task.failure_mode.clone();
        if self.world.label_noise > 0.0 {
            let mut rng = derived_rng(
                self.world.seed,
                "critic-noise",
                &[&capsule.round.to_le_bytes(), task.task_id.as_bytes()],
            );
            if rng.random_range(0.0..1.0) < self.world.label_noise {
                let idx = FAILURE_MODES
                    .iter()
                    .position(|m| *m == pattern)
                    .unwrap_or(0);
                pattern = FAILURE_MODES[(idx + 1) % FAILURE_MODES.len()].to_string();
            }
        }
        let attribution = match skill {
            None => Attribution::Inapplicable,
            Some(s) => {
                let effect = self.world.effect_of(&s.id);
                if effect < -0.05 {
                    Attribution::Hurt
                } else if effect > 0.05 {
                    Attribution::Helped
                } else {
                    Attribution::Neutral
                }
            }
        };
        Ok(VerdictDraft {
            attribution,
            pattern,
            confidence: Confidence::High,
            reason: "simulated diagnosis from the planted failure mode".to_string(),
        })
    }
}

/// Retrieval-consistent gate: picks the first presented candidate whose
/// text mentions the task's failure mode, else NONE.
pub struct SimGate;

impl GateOracle for SimGate {
    fn adjudicate(
        &self,
        task_text: &str,
        candidates: &[GateCandidate],
    ) -> Result<Option<String>, OracleError> {
        let Some(mode) = mode_marker(task_text) else { return Ok(None) };
        Ok(candidates
            .iter()
            .find(|c| c.intent.contains(mode) || c.guidance.contains(mode))
            .map(|c| c.id.clone()))
    }
}

fn snake_of(pattern: &str) -> String {
    let mut id: String = pattern
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    while id.contains("__") {
        id = id.replace("__", "_");
    }
    let id = id.trim_matches('_').to_string();
    if id.is_empty() || !id.as_bytes()[0].is_ascii_lowercase() {
        format!("skill_{id}")
    } else {
        id
    }
}

/// Fill the shared skill template for a canonical pattern. `salt` (nonzero)
/// varies the id, which tests use to mint distinct skills for one pattern.
pub fn template_skill_yaml(pattern: &str, salt: u64) -> String {
    let base = snake_of(pattern);
    let id = if salt == 0 { base } else { format!("{base}_{salt}") };
    let tokens: Vec<String> = crate::retrieval::tokenize(pattern).into_iter().take(4).collect();
    let mut yaml = format!(
        "id: {id}\nname: Counter for {pattern}\nversion: v1\nintent: avoid the recurring failure pattern '{pattern}'\ndescription: Steers the solver around '{pattern}' failures observed in evidence.\nsignals_match:\n"
    );
    for t in &tokens {
        yaml.push_str(&format!("- {t}\n"));
    }
    yaml.push_str(&format!(
        "preconditions:\n- task shows symptoms of {pattern}\ntags:\n- synthesized\nguidance:\n  applies_when: the task is at risk of {pattern}\n  key_insight: anticipate {pattern} and add the corresponding check before returning\n  common_pitfalls:\n  - repeating the {pattern} failure seen in the cluster\n  verify_before_returning: confirm the output is free of {pattern}\n"
    ));
    yaml
}

pub struct SimSynth {
    world: Arc<SimWorld>,
}

impl SynthOracle for SimSynth {
    fn synthesize(&self, req: &SynthRequest) -> Result<String, OracleError> {
        let _ = &self.world;
        Ok(template_skill_yaml(req.canonical_pattern, 0))
    }

    fn rewrite_meta(&self, current: &str, digest: &str) -> Result<String, OracleError> {
        let meta = parse_meta_skill(current)
            .map_err(|e| OracleError::MalformedResponse(e.to_string()))?;
        let mut dont = meta.dont_rules.clone();
        dont.retain(|r| !r.starts_with("recently seen:"));
        if !digest.is_empty() {
            dont.push(format!("recently seen: {}", digest.replace('\n', "; ")));
        }
        Ok(MetaSkill::compose(
            &meta.id,
            &meta.description,
            &meta.suite,
            MetaStatus::Active,
            &meta.scope,
            &meta.do_rules,
            &dont,
        )
        .raw_markdown)
    }
}

/// The full simulated oracle set over one shared world.
pub fn sim_oracles(world: Arc<SimWorld>, embed_seed: u64) -> Oracles {
    Oracles {
        solver: Arc::new(SimSolver { world: Arc::clone(&world) }),
        grader: Arc::new(SimGrader),
        critic: Arc::new(SimCritic { world: Arc::clone(&world) }),
        synth: Arc::new(SimSynth { world: Arc::clone(&world) }),
        gate: Arc::new(SimGate),
        embedder: Arc::new(NgramEmbedder::new(embed_seed)),
    }
}

/// Keep exactly the tasks the bare solver fails on at least one probe seed.
pub fn probe_filter(
    tasks: &[Task],
    solver: &dyn SolverOracle,
    grader: &dyn GraderOracle,
    probe_seeds: &[u64],
) -> Result<Vec<Task>, OracleError> {
    assert!(!probe_seeds.is_empty(), "at least one probe seed required");
    let mut retained = Vec::new();
    for task in tasks {
        let mut failed_once = false;
        for &seed in probe_seeds {
            let ctx = SolveContext { run_seed: seed, round: 0, split: task.split };
            let output = solver.solve(task, None, &ctx)?;
            if !grader.grade(task, &output)? {
                failed_once = true;
                break;
            }
        }
        if failed_once {
            retained.push(task.clone());
        }
    }
    Ok(retained)
}

/// Seeded sample of `n` tasks from a pool, re-split train/eval at a fixed
/// ratio: the subset construction step that follows the probe filter.
pub fn sample_split(pool: &[Task], n: usize, train_fraction: f64, seed: u64) -> TaskSuite {
    let mut rng = derived_rng(seed, "subset-sample", &[]);
    let mut picked: Vec<Task> = pool.to_vec();
    // Fisher-Yates, then truncate
    for i in (1..picked.len()).rev() {
        let j = rng.random_range(0..=i);
        picked.swap(i, j);
    }
    picked.truncate(n.min(pool.len()));
    let train_count = (picked.len() as f64 * train_fraction).round() as usize;
    for (i, task) in picked.iter_mut().enumerate() {
        task.split = if i < train_count { Split::Train } else { Split::Eval };
    }
    TaskSuite::new(picked)
}

/// Floor verification artifact: the computed bound next to what the runs
/// actually did.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FloorReport {
    pub p0_mean_eval: f64,
    pub params: BoundParams,
    pub floor: f64,
    /// Grand mean of per-seed mean eval pass rates.
    pub long_run_mean: f64,
    pub per_seed_mean: Vec<(u64, f64)>,
}

/// Run the full loop under simulated oracles for each seed and report the
/// curves next to the non-divergence floor.
pub fn simulate_run(
    world: &SimWorld,
    config: &RunConfig,
    rounds: u32,
    seeds: &[u64],
) -> Result<(Vec<RunReport>, FloorReport), EngineError> {
    use rayon::prelude::*;
    let mut cfg = config.clone();
    cfg.rounds = rounds;
    // seeds parallelize; keep each engine single-threaded
    cfg.parallelism = 1;

    let world = Arc::new(world.clone());
    let reports: Result<Vec<RunReport>, EngineError> = seeds
        .par_iter()
        .map(|&seed| {
            let store = EvidenceStore::open_memory()?
                .with_train_only_contribution(cfg.contribution_train_only);
            let oracles = sim_oracles(Arc::clone(&world), world.seed);
            let mut engine =
                Engine::new(cfg.clone(), world.suite(), oracles, seed, store, Clock::logical())?;
            engine.run()
        })
        .collect();
    let reports = reports?;

    let params = BoundParams::new(cfg.tau, cfg.n_min, cfg.cap, cfg.delta)
        .map_err(|e| EngineError::State(e.to_string()))?;
    let p0_mean_eval = world.mean_p0(Split::Eval);
    let floor = crate::bound::nondivergence_floor(p0_mean_eval, &params);
    let per_seed_mean: Vec<(u64, f64)> = reports
        .iter()
        .map(|r| {
            let curve: Vec<f64> = r.rounds.iter().map(|x| x.eval_pass1).collect();
            (r.seed, crate::report::mean(&curve))
        })
        .collect();
    let long_run_mean =
        crate::report::mean(&per_seed_mean.iter().map(|(_, m)| *m).collect::<Vec<f64>>());
    Ok((
        reports,
        FloorReport { p0_mean_eval, params, floor, long_run_mean, per_seed_mean },
    ))
}
