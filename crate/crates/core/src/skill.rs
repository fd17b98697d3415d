//! The skill artifact: a small natural-language YAML document with a guidance
//! block, a lifecycle status, and a canonical serialization.
//!
//! The canonical field order is fixed so that serializations are stable
//! across runs: embeddings and diffs are taken over the serialized form, and
//! a nondeterministic field order would silently churn both. The `embedding`
//! vector itself is never part of the YAML (it is derived data, persisted
//! separately), and the embedding surface additionally strips `status` and
//! the timestamps so a skill's vector does not drift across lifecycle
//! transitions.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::EmbeddingVector;

/// Default character budget for a serialized skill (measured on the
/// canonical form, not the raw model output).
pub const DEFAULT_CHAR_BUDGET: usize = 1500;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("malformed yaml: {0}")]
    MalformedYaml(String),
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("invalid id {0:?}: expected lowercase snake_case")]
    InvalidId(String),
    #[error("invalid status {0:?}: expected active, deprecated, or candidate")]
    InvalidStatus(String),
    #[error("guidance incomplete: applies_when plus at least one of key_insight / common_pitfalls is required")]
    GuidanceIncomplete,
    #[error("serialized skill is {actual} chars, over the {budget}-char budget")]
    OverBudget { actual: usize, budget: usize },
    #[error("missing yaml frontmatter")]
    MissingFrontmatter,
    #[error("missing section: {0}")]
    MissingSection(String),
}

/// Lifecycle status. Skills are never deleted; they only move along the
/// declared edges (CANDIDATE→ACTIVE, CANDIDATE→DEPRECATED, ACTIVE→DEPRECATED,
/// DEPRECATED→ACTIVE).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkillStatus {
    Active,
    Deprecated,
    Candidate,
}

impl SkillStatus {
    pub fn can_transition(self, to: SkillStatus) -> bool {
        use SkillStatus::*;
        matches!(
            (self, to),
            (Candidate, Active) | (Candidate, Deprecated) | (Active, Deprecated) | (Deprecated, Active)
        )
    }

    pub fn parse(s: &str) -> Result<Self, ValidationError> {
        match s.to_ascii_lowercase().as_str() {
            "active" => Ok(SkillStatus::Active),
            "deprecated" => Ok(SkillStatus::Deprecated),
            "candidate" => Ok(SkillStatus::Candidate),
            other => Err(ValidationError::InvalidStatus(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SkillStatus::Active => "active",
            SkillStatus::Deprecated => "deprecated",
            SkillStatus::Candidate => "candidate",
        }
    }
}

/// The injected payload: what the solver actually sees when a skill routes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guidance {
    pub applies_when: String,
    pub key_insight: Option<String>,
    pub common_pitfalls: Vec<String>,
    pub verify_before_returning: Option<String>,
}

impl Guidance {
    /// Schema rule: applies_when non-empty, plus at least one of
    /// key_insight / common_pitfalls.
    pub fn is_complete(&self) -> bool {
        !self.applies_when.trim().is_empty()
            && (self.key_insight.as_deref().is_some_and(|s| !s.trim().is_empty())
                || self.common_pitfalls.iter().any(|p| !p.trim().is_empty()))
    }

    /// Plain-text rendering used in solver prompts and gate candidate digests.
    pub fn render(&self) -> String {
        let mut out = format!("applies_when: {}", self.applies_when);
        if let Some(k) = &self.key_insight {
            out.push_str(&format!("\nkey_insight: {k}"));
        }
        if !self.common_pitfalls.is_empty() {
            out.push_str("\ncommon_pitfalls:");
            for p in &self.common_pitfalls {
                out.push_str(&format!("\n- {p}"));
            }
        }
        if let Some(v) = &self.verify_before_returning {
            out.push_str(&format!("\nverify_before_returning: {v}"));
        }
        out
    }
}

/// A skill. Field order here IS the canonical YAML order; do not reorder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Skill {
    pub id: String,
    pub name: String,
    pub version: String,
    pub intent: String,
    pub description: String,
    pub signals_match: Vec<String>,
    pub preconditions: Vec<String>,
    pub tags: Vec<String>,
    pub guidance: Guidance,
    pub status: SkillStatus,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// Derived vector over the embedding surface; never serialized into YAML.
    #[serde(skip)]
    pub embedding: Option<EmbeddingVector>,
}

/// Serialize-only view of the embedding surface: the semantic content,
/// without status or timestamps.
#[derive(Serialize)]
struct EmbeddingSurface<'a> {
    id: &'a str,
    name: &'a str,
    version: &'a str,
    intent: &'a str,
    description: &'a str,
    signals_match: &'a [String],
    preconditions: &'a [String],
    tags: &'a [String],
    guidance: &'a Guidance,
}

impl Skill {
    /// Canonical YAML form: deterministic, fixed field order, empty lists
    /// rendered as `[]`, absent optionals rendered as `null`.
    pub fn canonical_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("skill serialization cannot fail")
    }

    /// The string the embedder sees. Excludes status and timestamps so the
    /// vector is stable across lifecycle transitions and touch updates.
    pub fn embedding_surface(&self) -> String {
        serde_yaml::to_string(&EmbeddingSurface {
            id: &self.id,
            name: &self.name,
            version: &self.version,
            intent: &self.intent,
            description: &self.description,
            signals_match: &self.signals_match,
            preconditions: &self.preconditions,
            tags: &self.tags,
            guidance: &self.guidance,
        })
        .expect("skill serialization cannot fail")
    }

    /// Character count of the canonical form (the budgeted quantity).
    pub fn canonical_char_count(&self) -> usize {
        self.canonical_yaml().chars().count()
    }

    /// Retrieval surface for the lexical (tf-idf) index.
    pub fn lexical_surface(&self) -> String {
        let mut s = self.intent.clone();
        for cue in &self.signals_match {
            s.push(' ');
            s.push_str(cue);
        }
        s.push(' ');
        s.push_str(&self.guidance.applies_when);
        s
    }
}

/// Canonical serialization of a skill (alias for [`Skill::canonical_yaml`]).
pub fn serialize_skill(skill: &Skill) -> String {
    skill.canonical_yaml()
}

// Lenient deserialization target: every field optional, unknown keys ignored,
// `null` lists tolerated. Model output is messy; policy lives in the builders.
#[derive(Deserialize)]
struct RawSkill {
    id: Option<String>,
    name: Option<String>,
    version: Option<String>,
    intent: Option<String>,
    description: Option<String>,
    signals_match: Option<Vec<String>>,
    preconditions: Option<Vec<String>>,
    tags: Option<Vec<String>>,
    guidance: Option<RawGuidance>,
    status: Option<String>,
    created_at: Option<DateTime<Utc>>,
    updated_at: Option<DateTime<Utc>>,
}

#[derive(Deserialize)]
struct RawGuidance {
    applies_when: Option<String>,
    key_insight: Option<String>,
    common_pitfalls: Option<Vec<String>>,
    verify_before_returning: Option<String>,
}

fn parse_raw(yaml_text: &str) -> Result<RawSkill, ValidationError> {
    serde_yaml::from_str::<RawSkill>(yaml_text)
        .map_err(|e| ValidationError::MalformedYaml(e.to_string()))
}

pub fn is_snake_case_id(id: &str) -> bool {
    if id.is_empty() || !id.as_bytes()[0].is_ascii_lowercase() {
        return false;
    }
    if id.starts_with('_') || id.ends_with('_') || id.contains("__") {
        return false;
    }
    id.bytes()
        .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn require(field: Option<String>, name: &str) -> Result<String, ValidationError> {
    match field {
        Some(s) if !s.trim().is_empty() => Ok(s),
        _ => Err(ValidationError::MissingField(name.to_string())),
    }
}

fn build_guidance(raw: Option<RawGuidance>) -> Result<Guidance, ValidationError> {
    let raw = raw.ok_or_else(|| ValidationError::MissingField("guidance".to_string()))?;
    let applies_when = raw
        .applies_when
        .ok_or_else(|| ValidationError::MissingField("guidance.applies_when".to_string()))?;
    let guidance = Guidance {
        applies_when,
        key_insight: raw.key_insight.filter(|s| !s.trim().is_empty()),
        common_pitfalls: raw.common_pitfalls.unwrap_or_default(),
        verify_before_returning: raw.verify_before_returning.filter(|s| !s.trim().is_empty()),
    };
    if !guidance.is_complete() {
        return Err(ValidationError::GuidanceIncomplete);
    }
    Ok(guidance)
}

fn build_skill(raw: RawSkill, now: DateTime<Utc>) -> Result<Skill, ValidationError> {
    let id = require(raw.id, "id")?;
    if !is_snake_case_id(&id) {
        return Err(ValidationError::InvalidId(id));
    }
    let status = match raw.status {
        Some(s) => SkillStatus::parse(&s)?,
        None => SkillStatus::Candidate,
    };
    Ok(Skill {
        id,
        name: require(raw.name, "name")?,
        version: raw.version.filter(|v| !v.trim().is_empty()).unwrap_or_else(|| "v1".to_string()),
        intent: require(raw.intent, "intent")?,
        description: require(raw.description, "description")?,
        signals_match: raw.signals_match.unwrap_or_default(),
        preconditions: raw.preconditions.unwrap_or_default(),
        tags: raw.tags.unwrap_or_default(),
        guidance: build_guidance(raw.guidance)?,
        status,
        created_at: raw.created_at.unwrap_or(now),
        updated_at: raw.updated_at.unwrap_or(now),
        embedding: None,
    })
}

/// Faithful parse: honors the document's status and timestamps. This is the
/// read side of the file-format contract; `parse∘serialize` is the identity
/// on canonical documents.
pub fn parse_skill(yaml_text: &str) -> Result<Skill, ValidationError> {
    build_skill(parse_raw(yaml_text)?, DateTime::UNIX_EPOCH)
}

/// Synthesis-path validation: parse, enforce the schema and the character
/// budget, and return the skill as a CANDIDATE (whatever status the document
/// claimed). An [`ValidationError::OverBudget`] result signals the caller to
/// resynthesize.
pub fn validate_skill(
    yaml_text: &str,
    budget: usize,
    now: DateTime<Utc>,
) -> Result<Skill, ValidationError> {
    let mut skill = build_skill(parse_raw(yaml_text)?, now)?;
    skill.status = SkillStatus::Candidate;
    let actual = skill.canonical_char_count();
    if actual > budget {
        return Err(ValidationError::OverBudget { actual, budget });
    }
    Ok(skill)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_skill() -> Skill {
        Skill {
            id: "guard_null_input".to_string(),
            name: "Guard null input".to_string(),
            version: "v1".to_string(),
            intent: "defend against empty or null inputs before processing".to_string(),
            description: "Checks boundary conditions before the main routine runs.".to_string(),
            signals_match: vec!["null".to_string(), "empty".to_string()],
            preconditions: vec!["input arrives unvalidated".to_string()],
            tags: vec!["robustness".to_string()],
            guidance: Guidance {
                applies_when: "the task consumes external input that may be empty".to_string(),
                key_insight: Some("validate before use; prefer early returns".to_string()),
                common_pitfalls: vec!["indexing into an empty collection".to_string()],
                verify_before_returning: Some("re-check the empty-input path".to_string()),
            },
            status: SkillStatus::Candidate,
            created_at: DateTime::UNIX_EPOCH,
            updated_at: DateTime::UNIX_EPOCH,
            embedding: None,
        }
    }

    #[test]
    fn minimal_valid_yaml_yields_candidate() {
        let yaml = "\
id: minimal_skill
name: Minimal
intent: smallest schema-complete document
description: nothing beyond the required fields
guidance:
  applies_when: always
  key_insight: keep it small
";
        let skill = validate_skill(yaml, DEFAULT_CHAR_BUDGET, DateTime::UNIX_EPOCH).unwrap();
        assert_eq!(skill.status, SkillStatus::Candidate);
        assert_eq!(skill.version, "v1");
        assert!(skill.signals_match.is_empty());
    }

    #[test]
    fn guidance_without_insight_or_pitfalls_is_incomplete() {
        let yaml = "\
id: hollow
name: Hollow
intent: x
description: y
guidance:
  applies_when: always
  verify_before_returning: check
";
        let err = validate_skill(yaml, DEFAULT_CHAR_BUDGET, DateTime::UNIX_EPOCH).unwrap_err();
        assert_eq!(err, ValidationError::GuidanceIncomplete);
    }

    #[test]
    fn over_budget_reports_canonical_length() {
        let mut skill = sample_skill();
        // pad description until the canonical form is exactly budget + 1
        let base = skill.canonical_char_count();
        let budget = base + 10;
        skill.description.push_str(&"x".repeat(11));
        let yaml = skill.canonical_yaml();
        assert_eq!(yaml.chars().count(), budget + 1);
        let err = validate_skill(&yaml, budget, DateTime::UNIX_EPOCH).unwrap_err();
        assert_eq!(
            err,
            ValidationError::OverBudget { actual: budget + 1, budget }
        );
        // one char under passes
        let mut ok = sample_skill();
        ok.description.push_str(&"x".repeat(10));
        assert!(validate_skill(&ok.canonical_yaml(), budget, DateTime::UNIX_EPOCH).is_ok());
    }

    #[test]
    fn malformed_and_missing_fields() {
        assert!(matches!(
            validate_skill(": : :", 1500, DateTime::UNIX_EPOCH),
            Err(ValidationError::MalformedYaml(_))
        ));
        let err = validate_skill("name: no id\n", 1500, DateTime::UNIX_EPOCH).unwrap_err();
        assert_eq!(err, ValidationError::MissingField("id".to_string()));
        assert!(matches!(
            validate_skill("id: Bad-Id\nname: n\nintent: i\ndescription: d\nguidance:\n  applies_when: w\n  key_insight: k\n", 1500, DateTime::UNIX_EPOCH),
            Err(ValidationError::InvalidId(_))
        ));
    }

    #[test]
    fn reserialize_is_identity_on_canonical_documents() {
        let skill = sample_skill();
        let yaml = serialize_skill(&skill);
        let reparsed = parse_skill(&yaml).unwrap();
        assert_eq!(serialize_skill(&reparsed), yaml);
        assert_eq!(reparsed, skill);
    }

    #[test]
    fn empty_lists_render_not_omitted() {
        let mut skill = sample_skill();
        skill.signals_match.clear();
        skill.preconditions.clear();
        skill.tags.clear();
        let yaml = skill.canonical_yaml();
        assert!(yaml.contains("signals_match: []"), "yaml was:\n{yaml}");
        assert!(yaml.contains("preconditions: []"));
        assert!(yaml.contains("tags: []"));
    }

    #[test]
    fn serializations_differ_only_in_updated_at() {
        let a = sample_skill();
        let mut b = sample_skill();
        b.updated_at = b.updated_at + chrono::Duration::seconds(7);
        let (ya, yb) = (a.canonical_yaml(), b.canonical_yaml());
        let diff: Vec<(&str, &str)> = ya
            .lines()
            .zip(yb.lines())
            .filter(|(la, lb)| la != lb)
            .collect();
        assert_eq!(diff.len(), 1);
        assert!(diff[0].0.starts_with("updated_at:"));
        // and the embedding surface is identical
        assert_eq!(a.embedding_surface(), b.embedding_surface());
    }

    #[test]
    fn status_transition_edges() {
        use SkillStatus::*;
        assert!(Candidate.can_transition(Active));
        assert!(Candidate.can_transition(Deprecated));
        assert!(Active.can_transition(Deprecated));
        assert!(Deprecated.can_transition(Active));
        assert!(!Active.can_transition(Candidate));
        assert!(!Deprecated.can_transition(Candidate));
        assert!(!Active.can_transition(Active));
    }

    #[test]
    fn snake_case_rules() {
        assert!(is_snake_case_id("ok_id_2"));
        assert!(!is_snake_case_id(""));
        assert!(!is_snake_case_id("Bad"));
        assert!(!is_snake_case_id("_lead"));
        assert!(!is_snake_case_id("trail_"));
        assert!(!is_snake_case_id("dou__ble"));
        assert!(!is_snake_case_id("9start"));
    }
}
