//! Meta-skills: one markdown document per suite carrying a schema lock (the
//! guidance fields every skill must populate, one `## Do` bullet each) and an
//! authoring prior (stylistic rules) consumed at synthesis time. Registering
//! a new active meta-skill for a suite retires the prior one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::skill::ValidationError;

/// Guidance field names the `## Do` section must cover, in order. This is
/// the schema lock a meta-skill refresh has to preserve.
pub const SCHEMA_LOCK_FIELDS: [&str; 4] = [
    "applies_when",
    "key_insight",
    "common_pitfalls",
    "verify_before_returning",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaStatus {
    Active,
    Retired,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaSkill {
    pub id: String,
    pub description: String,
    pub suite: String,
    pub status: MetaStatus,
    pub scope: String,
    pub do_rules: Vec<String>,
    pub dont_rules: Vec<String>,
    pub raw_markdown: String,
}

#[derive(Deserialize)]
struct Frontmatter {
    id: Option<String>,
    description: Option<String>,
    suite: Option<String>,
    status: Option<MetaStatus>,
}

impl MetaSkill {
    /// Rendering is the identity on the stored document, so
    /// `parse(render(m)) == m`.
    pub fn render(&self) -> &str {
        &self.raw_markdown
    }

    /// Build the canonical markdown from parts and parse it back, so the
    /// struct fields and the raw document can never disagree.
    pub fn compose(
        id: &str,
        description: &str,
        suite: &str,
        status: MetaStatus,
        scope: &str,
        do_rules: &[String],
        dont_rules: &[String],
    ) -> MetaSkill {
        let status_str = match status {
            MetaStatus::Active => "active",
            MetaStatus::Retired => "retired",
        };
        let mut md = format!(
            "---\nid: {id}\ndescription: {description}\nsuite: {suite}\nstatus: {status_str}\n---\n## Scope\n{scope}\n\n## Do\n"
        );
        for rule in do_rules {
            md.push_str(&format!("- {rule}\n"));
        }
        md.push_str("\n## Don't\n");
        for rule in dont_rules {
            md.push_str(&format!("- {rule}\n"));
        }
        parse_meta_skill(&md).expect("composed meta-skill must parse")
    }

    /// True when every locked guidance field has a `## Do` bullet prefixed
    /// with its name.
    pub fn preserves_schema_lock(&self) -> bool {
        SCHEMA_LOCK_FIELDS.iter().all(|field| {
            self.do_rules
                .iter()
                .any(|rule| rule.starts_with(&format!("{field}:")))
        })
    }

    /// The text injected into the synthesizer prompt as authoring guidance.
    pub fn authoring_text(&self) -> &str {
        &self.raw_markdown
    }
}

fn section_bullets(body: &str, heading: &str) -> Option<Vec<String>> {
    let lines: Vec<&str> = body.lines().collect();
    let start = lines.iter().position(|l| l.trim() == format!("## {heading}"))?;
    let mut items = Vec::new();
    for line in &lines[start + 1..] {
        if line.trim_start().starts_with("##") {
            break;
        }
        if let Some(item) = line.trim_start().strip_prefix("- ") {
            items.push(item.trim_end().to_string());
        }
    }
    Some(items)
}

fn section_text(body: &str, heading: &str) -> Option<String> {
    let lines: Vec<&str> = body.lines().collect();
    let start = lines.iter().position(|l| l.trim() == format!("## {heading}"))?;
    let mut text = Vec::new();
    for line in &lines[start + 1..] {
        if line.trim_start().starts_with("##") {
            break;
        }
        text.push(*line);
    }
    Some(text.join("\n").trim().to_string())
}

/// Parse a meta-skill markdown document: YAML frontmatter between `---`
/// fences, then `## Scope`, `## Do`, and `## Don't` sections.
pub fn parse_meta_skill(markdown: &str) -> Result<MetaSkill, ValidationError> {
    let rest = markdown
        .strip_prefix("---\n")
        .ok_or(ValidationError::MissingFrontmatter)?;
    let end = rest.find("\n---").ok_or(ValidationError::MissingFrontmatter)?;
    let fm_text = &rest[..end];
    let body = rest[end + 4..].trim_start_matches('\n');

    let fm: Frontmatter = serde_yaml::from_str(fm_text)
        .map_err(|e| ValidationError::MalformedYaml(e.to_string()))?;
    let id = fm.id.ok_or_else(|| ValidationError::MissingField("id".to_string()))?;
    let suite = fm.suite.ok_or_else(|| ValidationError::MissingField("suite".to_string()))?;

    let scope = section_text(body, "Scope")
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ValidationError::MissingSection("Scope".to_string()))?;
    let do_rules = section_bullets(body, "Do")
        .ok_or_else(|| ValidationError::MissingSection("Do".to_string()))?;
    let dont_rules = section_bullets(body, "Don't")
        .ok_or_else(|| ValidationError::MissingSection("Don't".to_string()))?;

    Ok(MetaSkill {
        id,
        description: fm.description.unwrap_or_default(),
        suite,
        status: fm.status.unwrap_or(MetaStatus::Active),
        scope,
        do_rules,
        dont_rules,
        raw_markdown: markdown.to_string(),
    })
}

/// Default meta-skill shipped active at round 0 for a suite: the schema lock
/// plus a generic authoring prior.
pub fn default_meta_skill(suite: &str) -> MetaSkill {
    MetaSkill::compose(
        &format!("default_{suite}"),
        &format!("Authoring guidance for {suite} pattern-level skills."),
        suite,
        MetaStatus::Active,
        "Short natural-language skills that steer a solver away from one recurring failure pattern.",
        &[
            "applies_when: one sentence naming the task shape that triggers the pattern".to_string(),
            "key_insight: the single correction that prevents the failure".to_string(),
            "common_pitfalls: cite observed failure modes from the evidence, 1-3 bullets".to_string(),
            "verify_before_returning: name one concrete post-check".to_string(),
        ],
        &[
            "vague guidance that does not mention the failure pattern".to_string(),
            "multi-pattern skills; one skill per canonical pattern".to_string(),
            "restating the task instead of the correction".to_string(),
        ],
    )
}

/// Per-suite registry enforcing the one-active-meta rule. Nothing is ever
/// removed; superseded metas flip to retired.
#[derive(Debug, Default, Clone)]
pub struct MetaRegistry {
    by_suite: BTreeMap<String, Vec<MetaSkill>>,
}

impl MetaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a meta-skill. If it is active, any previously active meta for
    /// the same suite is retired.
    pub fn register(&mut self, meta: MetaSkill) {
        let entry = self.by_suite.entry(meta.suite.clone()).or_default();
        if meta.status == MetaStatus::Active {
            for prior in entry.iter_mut() {
                prior.status = MetaStatus::Retired;
            }
        }
        entry.push(meta);
    }

    pub fn active_for(&self, suite: &str) -> Option<&MetaSkill> {
        self.by_suite
            .get(suite)?
            .iter()
            .rev()
            .find(|m| m.status == MetaStatus::Active)
    }

    pub fn all_for(&self, suite: &str) -> &[MetaSkill] {
        self.by_suite.get(suite).map(Vec::as_slice).unwrap_or(&[])
    }
}
