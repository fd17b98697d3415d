//! Run configuration. Every governance and loop knob lives here with its
//! default; each of the eight standard ablations (A1–A8) is expressible as
//! exactly the documented override of the default document.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::CoverSurface;
use crate::router::RouterMode;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown ablation: {0}")]
    UnknownAblation(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Distribution of true skill effects in a generated world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectGenConfig {
    /// Every skill gets the same effect.
    Constant { value: f64 },
    /// Effects drawn uniformly from [low, high].
    Uniform { low: f64, high: f64 },
    /// Every skill gets `-magnitude` (the worst constant allowed).
    Adversarial { magnitude: f64 },
}

impl Default for EffectGenConfig {
    fn default() -> Self {
        EffectGenConfig::Uniform { low: 0.0, high: 0.3 }
    }
}

/// Parameters for generating a simulated world on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldGenConfig {
    pub tasks: usize,
    pub train_fraction: f64,
    pub failure_modes: usize,
    pub world_seed: u64,
    pub effects: EffectGenConfig,
    /// Probability the simulated critic corrupts a pattern label.
    pub label_noise: f64,
}

impl Default for WorldGenConfig {
    fn default() -> Self {
        WorldGenConfig {
            tasks: 100,
            train_fraction: 0.6,
            failure_modes: 8,
            world_seed: 7,
            effects: EffectGenConfig::default(),
            label_noise: 0.0,
        }
    }
}

/// Where the simulated world comes from: a spec file or generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldSource {
    Path(PathBuf),
    Generate(WorldGenConfig),
}

impl Default for WorldSource {
    fn default() -> Self {
        WorldSource::Generate(WorldGenConfig::default())
    }
}

/// Remote model endpoint settings. Credentials come from the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    pub embed_model: String,
    pub api_key_env: String,
    pub embed_dim: usize,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub audit_log: Option<PathBuf>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://localhost:8080/v1".to_string(),
            model: "solver-model".to_string(),
            embed_model: "embed-model".to_string(),
            api_key_env: "SKILLBANK_API_KEY".to_string(),
            embed_dim: 64,
            timeout_secs: 60,
            max_retries: 3,
            audit_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Sim { world: WorldSource },
    Scripted { script: PathBuf },
    Remote(RemoteConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Sim { world: WorldSource::default() }
    }
}

/// All loop knobs. An empty config document (`{}`) is the default
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rounds: u32,
    pub seeds: Vec<u64>,
    /// Synthesis lookback window W, in rounds.
    pub lookback_rounds: u32,
    /// Shortlist size K for each retrieval stage.
    pub shortlist_k: usize,
    /// Bank size at or below which the gate sees every active skill.
    pub full_bank_cutoff: usize,
    pub tau_canon: f64,
    pub cover_threshold: f64,
    pub dedup_threshold: f64,
    pub char_budget: usize,
    pub max_skills_per_round: u32,
    pub min_cluster_size: usize,
    pub n_min: u64,
    pub tau: f64,
    pub cap: usize,
    pub tau_rb: f64,
    pub rb_persistence: u32,
    pub router_mode: RouterMode,
    /// Meta refresh cadence in rounds; absent means disabled.
    pub meta_cadence: Option<u32>,
    pub cover_guard_enabled: bool,
    /// Whether the synthesizer receives the meta-skill at all.
    pub use_meta: bool,
    /// CANDIDATE skills stay train-routable until this many trials accrue.
    pub bootstrap_trials: u64,
    pub resynth_retries: u32,
    pub parallelism: usize,
    /// Restrict the contribution estimator to train capsules.
    pub contribution_train_only: bool,
    pub cover_surface: CoverSurface,
    /// Per-capsule excerpt cap in synthesis prompts, in characters.
    pub capsule_excerpt_cap: usize,
    /// Per-skill confidence budget δ for the non-divergence floor.
    pub delta: f64,
    /// Task list (JSON array) for backends that do not carry their own
    /// tasks; required by the remote backend.
    pub suite_path: Option<PathBuf>,
    pub backend: BackendConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rounds: 100,
            seeds: vec![42, 7, 13],
            lookback_rounds: 6,
            shortlist_k: 10,
            full_bank_cutoff: 20,
            tau_canon: 0.85,
            cover_threshold: 0.85,
            dedup_threshold: 0.85,
            char_budget: 1500,
            max_skills_per_round: 2,
            min_cluster_size: 3,
            n_min: 100,
            tau: 0.10,
            cap: 50,
            tau_rb: 0.10,
            rb_persistence: 5,
            router_mode: RouterMode::Default,
            meta_cadence: None,
            cover_guard_enabled: true,
            use_meta: true,
            bootstrap_trials: 10,
            resynth_retries: 2,
            parallelism: 8,
            contribution_train_only: false,
            cover_surface: CoverSurface::AppliesWhen,
            capsule_excerpt_cap: 800,
            delta: 1e-3,
            suite_path: None,
            backend: BackendConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.shortlist_k < 1 {
            return Err(ConfigError::Invalid("shortlist_k must be at least 1".into()));
        }
        if self.lookback_rounds < 1 {
            return Err(ConfigError::Invalid("lookback_rounds must be at least 1".into()));
        }
        if self.cap < 1 || self.n_min < 1 {
            return Err(ConfigError::Invalid("cap and n_min must be at least 1".into()));
        }
        if !(self.tau_canon > 0.0 && self.tau_canon <= 1.0) {
            return Err(ConfigError::Invalid("tau_canon must be in (0, 1]".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(ConfigError::Invalid("delta must be in (0, 1)".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("at least one seed required".into()));
        }
        Ok(())
    }
}

pub const ABLATION_NAMES: [&str; 8] = ["A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8"];

/// Apply one named single-knob ablation to a base configuration.
pub fn apply_ablation(base: &RunConfig, name: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = base.clone();
    match name {
        "A1" => cfg.router_mode = RouterMode::ForcedNone,
        "A2" => cfg.router_mode = RouterMode::RetrievalOnly,
        "A3" => cfg.use_meta = false,
        "A4" => {
            cfg.n_min = 20;
            cfg.tau = 0.0;
        }
        "A5" => cfg.tau_canon = 1.0,
        "A6" => cfg.cover_guard_enabled = false,
        "A7" => cfg.cap = 100,
        "A8" => cfg.meta_cadence = Some(10),
        other => return Err(ConfigError::UnknownAblation(other.to_string())),
    }
    Ok(cfg)
}

/// The documented override set per ablation, as (json field, expected value)
/// pairs. The acceptance suite checks the config diff equals exactly this.
pub fn ablation_diff_spec(name: &str) -> Result<Vec<(&'static str, serde_json::Value)>, ConfigError> {
    use serde_json::json;
    Ok(match name {
        "A1" => vec![("router_mode", json!("FORCED_NONE"))],
        "A2" => vec![("router_mode", json!("RETRIEVAL_ONLY"))],
        "A3" => vec![("use_meta", json!(false))],
        "A4" => vec![("n_min", json!(20)), ("tau", json!(0.0))],
        "A5" => vec![("tau_canon", json!(1.0))],
        "A6" => vec![("cover_guard_enabled", json!(false))],
        "A7" => vec![("cap", json!(100))],
        "A8" => vec![("meta_cadence", json!(10))],
        other => return Err(ConfigError::UnknownAblation(other.to_string())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        // spot-check the documented defaults
        assert_eq!(cfg.rounds, 100);
        assert_eq!(cfg.seeds, vec![42, 7, 13]);
        assert_eq!(cfg.lookback_rounds, 6);
        assert_eq!(cfg.shortlist_k, 10);
        assert_eq!(cfg.full_bank_cutoff, 20);
        assert_eq!(cfg.tau_canon, 0.85);
        assert_eq!(cfg.char_budget, 1500);
        assert_eq!(cfg.max_skills_per_round, 2);
        assert_eq!(cfg.min_cluster_size, 3);
        assert_eq!(cfg.n_min, 100);
        assert_eq!(cfg.tau, 0.10);
        assert_eq!(cfg.cap, 50);
        assert_eq!(cfg.tau_rb, 0.10);
        assert_eq!(cfg.rb_persistence, 5);
        assert_eq!(cfg.meta_cadence, None);
        assert!(cfg.cover_guard_enabled);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json("{\"no_such_knob\": 1}").is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = cfg.to_json();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_ablation_rejected() {
        assert_eq!(
            apply_ablation(&RunConfig::default(), "A9").unwrap_err(),
            ConfigError::UnknownAblation("A9".to_string())
        );
    }

    #[test]
    fn each_ablation_diff_is_exactly_the_documented_set() {
        let base = RunConfig::default();
        let base_json = serde_json::to_value(&base).unwrap();
        for name in ABLATION_NAMES {
            let ablated = apply_ablation(&base, name).unwrap();
            let ablated_json = serde_json::to_value(&ablated).unwrap();
            let spec = ablation_diff_spec(name).unwrap();
            let mut changed: Vec<String> = Vec::new();
            for (key, base_val) in base_json.as_object().unwrap() {
                let new_val = &ablated_json[key];
                if new_val != base_val {
                    changed.push(key.clone());
                    let expect = spec.iter().find(|(k, _)| k == key);
                    assert!(expect.is_some(), "{name}: unexpected change in {key}");
                    assert_eq!(&expect.unwrap().1, new_val, "{name}: wrong value for {key}");
                }
            }
            assert_eq!(changed.len(), spec.len(), "{name}: diff size mismatch");
        }
    }
}
