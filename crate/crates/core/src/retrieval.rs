//! Retrieval machinery: embedding vectors and cosine similarity, a smoothed
//! tf-idf index, the two-stage shortlist (tf-idf top-K ∪ embedding top-K),
//! and every threshold-based similarity check the lifecycle uses
//! (pattern canonicalization, cover-guard, bank-dedup).
//!
//! Banks stay small (≤ ~100 skills), so everything here is a brute-force
//! scan; there is no approximate nearest-neighbor structure on purpose.
//!
//! tf-idf formula: raw term counts weighted by `ln((1 + N) / (1 + df)) + 1`,
//! cosine over the weighted vectors. Tokenization is lowercase, split on
//! non-alphanumerics, no stemming.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::backends::{Embedder, OracleError};
use crate::skill::Skill;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("all-zero embedding vector")]
    ZeroVector,
    #[error("skill {0} has no embedding")]
    MissingEmbedding(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Fixed-length real vector produced by an embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

/// Standard cosine similarity. Bitwise-identical vectors score exactly 1.0,
/// which is what makes a canonicalization threshold of 1.0 mean "merge only
/// identical embeddings" instead of depending on float rounding.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if u.dim() != v.dim() {
        return Err(RetrievalError::DimensionMismatch(u.dim(), v.dim()));
    }
    if u.is_zero() || v.is_zero() {
        return Err(RetrievalError::ZeroVector);
    }
    if u.0 == v.0 {
        return Ok(1.0);
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.0.iter().zip(&v.0) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Sparse tf-idf index over a fixed document set. Rebuilt whenever the
/// ACTIVE set changes; lookups are read-only.
#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<f64>,
    doc_ids: Vec<String>,
    doc_vectors: Vec<HashMap<usize, f64>>,
    doc_norms: Vec<f64>,
}

impl TfIdfIndex {
    pub fn build(docs: &[(String, String)]) -> Self {
        let n = docs.len();
        let mut vocabulary: BTreeMap<String, usize> = BTreeMap::new();
        let mut doc_terms: Vec<HashMap<usize, f64>> = Vec::with_capacity(n);
        let mut df: Vec<usize> = Vec::new();
        for (_, text) in docs {
            let mut counts: HashMap<usize, f64> = HashMap::new();
            for tok in tokenize(text) {
                let next = vocabulary.len();
                let idx = *vocabulary.entry(tok).or_insert(next);
                if idx == df.len() {
                    df.push(0);
                }
                *counts.entry(idx).or_insert(0.0) += 1.0;
            }
            for idx in counts.keys() {
                df[*idx] += 1;
            }
            doc_terms.push(counts);
        }
        let idf: Vec<f64> = df
            .iter()
            .map(|&d| ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        let mut doc_vectors = Vec::with_capacity(n);
        let mut doc_norms = Vec::with_capacity(n);
        for counts in doc_terms {
            let weighted: HashMap<usize, f64> =
                counts.into_iter().map(|(i, tf)| (i, tf * idf[i])).collect();
            let norm = weighted.values().map(|w| w * w).sum::<f64>().sqrt();
            doc_vectors.push(weighted);
            doc_norms.push(norm);
        }
        TfIdfIndex {
            vocabulary,
            idf,
            doc_ids: docs.iter().map(|(id, _)| id.clone()).collect(),
            doc_vectors,
            doc_norms,
        }
    }

    /// All documents scored against the query, sorted by descending score
    /// with ties broken by id. Deterministic for any input order.
    pub fn rank(&self, query: &str) -> Vec<(String, f64)> {
        let mut q: HashMap<usize, f64> = HashMap::new();
        for tok in tokenize(query) {
            if let Some(&idx) = self.vocabulary.get(&tok) {
                *q.entry(idx).or_insert(0.0) += 1.0;
            }
        }
        for (idx, tf) in q.iter_mut() {
            *tf *= self.idf[*idx];
        }
        let qnorm = q.values().map(|w| w * w).sum::<f64>().sqrt();
        let mut scored: Vec<(String, f64)> = self
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let dot: f64 = q
                    .iter()
                    .filter_map(|(idx, w)| self.doc_vectors[i].get(idx).map(|d| d * w))
                    .sum();
                let denom = qnorm * self.doc_norms[i];
                let score = if denom > 0.0 { dot / denom } else { 0.0 };
                (id.clone(), score)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        scored
    }

    pub fn top_k(&self, query: &str, k: usize) -> Vec<String> {
        self.rank(query).into_iter().take(k).map(|(id, _)| id).collect()
    }
}

/// Ids of the K highest-scoring documents for the query under tf-idf
/// weighting; fewer when fewer documents exist.
pub fn tfidf_topk(query: &str, docs: &[(String, String)], k: usize) -> Vec<String> {
    TfIdfIndex::build(docs).top_k(query, k)
}

fn sorted_active(skills: &[Skill]) -> Vec<&Skill> {
    let mut v: Vec<&Skill> = skills.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

fn skill_embedding<'a>(s: &'a Skill) -> Result<&'a EmbeddingVector, RetrievalError> {
    s.embedding
        .as_ref()
        .ok_or_else(|| RetrievalError::MissingEmbedding(s.id.clone()))
}

/// Two-stage shortlist: tf-idf top-K ∪ embedding top-K over the given
/// skills. Order is tf-idf hits by rank, then embedding-only hits by rank;
/// the result is invariant under permutation of the input list.
pub fn shortlist(
    task_text: &str,
    active_skills: &[Skill],
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<String>, RetrievalError> {
    let skills = sorted_active(active_skills);
    if skills.is_empty() {
        return Ok(Vec::new());
    }
    let docs: Vec<(String, String)> = skills
        .iter()
        .map(|s| (s.id.clone(), s.lexical_surface()))
        .collect();
    let lexical = tfidf_topk(task_text, &docs, k);

    let query = embedder.embed_one(task_text)?;
    let mut sims: Vec<(String, f64)> = Vec::with_capacity(skills.len());
    for s in &skills {
        sims.push((s.id.clone(), cosine(&query, skill_embedding(s)?)?));
    }
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let semantic: Vec<String> = sims.into_iter().take(k).map(|(id, _)| id).collect();

    let mut union = lexical;
    for id in semantic {
        if !union.contains(&id) {
            union.push(id);
        }
    }
    Ok(union)
}

/// Minimal union-find with path compression and union by rank.
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            self.parent[x] = self.find(self.parent[x]);
        }
        self.parent[x]
    }

    pub fn union(&mut self, x: usize, y: usize) {
        let (rx, ry) = (self.find(x), self.find(y));
        if rx == ry {
            return;
        }
        if self.rank[rx] < self.rank[ry] {
            self.parent[rx] = ry;
        } else if self.rank[rx] > self.rank[ry] {
            self.parent[ry] = rx;
        } else {
            self.parent[ry] = rx;
            self.rank[rx] += 1;
        }
    }
}

/// Idempotent map from pattern strings to the canonical representative of
/// their similarity component.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CanonicalMap {
    map: BTreeMap<String, String>,
}

impl CanonicalMap {
    /// Canonical form of a pattern; unknown patterns map to themselves.
    pub fn canonical<'a>(&'a self, pattern: &'a str) -> &'a str {
        self.map.get(pattern).map(String::as_str).unwrap_or(pattern)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.map.iter()
    }
}

/// Union-find over pairwise cosine similarity of pattern embeddings:
/// patterns land in one component iff connected by a chain of pairwise
/// cosine ≥ `tau_canon`. The representative is the most frequent pattern in
/// the component (ties: lexicographically smallest).
pub fn canonicalize(
    patterns: &[String],
    tau_canon: f64,
    embedder: &dyn Embedder,
) -> Result<CanonicalMap, RetrievalError> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for p in patterns {
        *freq.entry(p.as_str()).or_insert(0) += 1;
    }
    let unique: Vec<&str> = freq.keys().copied().collect();
    if unique.is_empty() {
        return Ok(CanonicalMap::default());
    }
    let texts: Vec<String> = unique.iter().map(|p| p.to_string()).collect();
    let vectors = embedder.embed(&texts)?;

    let mut uf = UnionFind::new(unique.len());
    for i in 0..unique.len() {
        for j in (i + 1)..unique.len() {
            if cosine(&vectors[i], &vectors[j])? >= tau_canon {
                uf.union(i, j);
            }
        }
    }

    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..unique.len() {
        components.entry(uf.find(i)).or_default().push(i);
    }
    let mut map = BTreeMap::new();
    for members in components.values() {
        let rep = members
            .iter()
            .max_by(|&&a, &&b| {
                freq[unique[a]]
                    .cmp(&freq[unique[b]])
                    .then_with(|| unique[b].cmp(unique[a]))
            })
            .copied()
            .expect("component is non-empty");
        for &m in members {
            map.insert(unique[m].to_string(), unique[rep].to_string());
        }
    }
    Ok(CanonicalMap { map })
}

/// Which skill-side text the cover-guard compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverSurface {
    AppliesWhen,
    FullYaml,
}

/// True iff some active skill covers the cluster pattern at or above the
/// threshold (cosine against the skill's applies_when embedding by default).
pub fn is_covered(
    cluster_pattern: &str,
    active_skills: &[Skill],
    threshold: f64,
    surface: CoverSurface,
    embedder: &dyn Embedder,
) -> Result<bool, RetrievalError> {
    if active_skills.is_empty() {
        return Ok(false);
    }
    let query = embedder.embed_one(cluster_pattern)?;
    for s in active_skills {
        let sim = match surface {
            CoverSurface::AppliesWhen => {
                let v = embedder.embed_one(&s.guidance.applies_when)?;
                cosine(&query, &v)?
            }
            CoverSurface::FullYaml => cosine(&query, skill_embedding(s)?)?,
        };
        if sim >= threshold {
            return Ok(true);
        }
    }
    Ok(false)
}

/// True iff any bank skill's full-YAML embedding is within `threshold`
/// cosine of the candidate's.
pub fn is_bank_duplicate(
    candidate: &Skill,
    bank: &[&Skill],
    threshold: f64,
) -> Result<bool, RetrievalError> {
    let cand = skill_embedding(candidate)?;
    for s in bank {
        if cosine(cand, skill_embedding(s)?)? >= threshold {
            return Ok(true);
        }
    }
    Ok(false)
}
