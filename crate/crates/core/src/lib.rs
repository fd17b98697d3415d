//! Lifecycle engine for self-evolving natural-language skill libraries.
//!
//! A frozen language model (or a simulated stand-in) solves tasks round after
//! round while this crate manages the library around it: routing one skill or
//! none into each attempt, logging every outcome as evidence, critiquing
//! failures, synthesizing new skills from recurring failure patterns, and
//! retiring skills whose measured contribution goes negative. Governance is
//! deliberately minimal — an evidence floor, a retirement threshold, and a
//! bounded active cap — and the `bound` module computes the resulting
//! non-divergence floor, which the simulation backend verifies by Monte Carlo.
//!
//! Module map:
//! - [`skill`] / [`meta`]: typed artifacts (skill YAML, meta-skill markdown)
//! - [`bank`]: the in-memory skill bank with status-transition rules
//! - [`evidence`]: append-only capsule/verdict store and contribution stats
//! - [`retrieval`]: embeddings, tf-idf, shortlisting, canonicalization
//! - [`router`]: one-skill-or-none selection per task
//! - [`synth`]: failure clustering and skill synthesis
//! - [`curator`]: outcome-driven retirement and cap enforcement
//! - [`engine`]: the five-phase round loop, snapshots, rollback
//! - [`backends`]: oracle traits plus sim, scripted, and remote backends
//! - [`bound`]: Hoeffding deviation and the non-divergence floor
//! - [`config`] / [`report`]: run configuration, ablations, and artifacts

pub mod backends;
pub mod bank;
pub mod bound;
pub mod config;
pub mod curator;
pub mod engine;
pub mod evidence;
pub mod meta;
pub mod report;
pub mod retrieval;
pub mod router;
pub mod skill;
pub mod synth;
pub mod util;

pub use bank::Bank;
pub use config::{apply_ablation, RunConfig};
pub use engine::Engine;
pub use evidence::{Capsule, EvidenceStore, Split, Verdict};
pub use skill::{Guidance, Skill, SkillStatus};
