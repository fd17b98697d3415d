//! Remote model backend: every oracle role implemented as a templated HTTP
//! call against an OpenAI-style endpoint (`/chat/completions` and
//! `/embeddings`), with bounded retry on 429/5xx/timeouts, response
//! validation before anything enters the loop, and an optional JSONL audit
//! log of request/response pairs.

use std::fs::OpenOptions;
use std::io::Write;
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::backends::{
    CriticOracle, Embedder, GateCandidate, GateOracle, GraderOracle, OracleError, Oracles,
    SolveContext, SolverOracle, SynthOracle, SynthRequest, Task, VerdictDraft,
};
use crate::config::RemoteConfig;
use crate::evidence::{Attribution, Capsule, Confidence};
use crate::retrieval::EmbeddingVector;
use crate::skill::Skill;
use std::sync::Arc;

const SOLVER_SYSTEM: &str = "You are a Solver. Solve the task directly. \
If a skill guidance block is present, apply it. Output only the solution.";

const GRADER_SYSTEM: &str = "You are a Grader. Given a task and a candidate \
solution, reply with exactly PASS or FAIL.";

const CRITIC_SYSTEM: &str = "You are a Critic. Given a task, the skill the \
Router chose (if any), the solver's output, and the grader's verdict, judge \
whether the skill helped, hurt, was neutral, or was inapplicable, and label \
the failure by pattern.\n\nOUTPUT: YAML with fields:\n  attribution: HELPED | \
HURT | NEUTRAL | INAPPLICABLE\n  pattern: short string\n  confidence: LOW | \
MEDIUM | HIGH\n  reason: one sentence";

const SYNTH_SYSTEM: &str = "You author one skill YAML that would help the \
Solver avoid the failure pattern in this cluster. The authoring guidance \
below is the current meta-skill.";

const GATE_SYSTEM: &str = "You are a Router gate. Given a task and candidate \
skills, reply with exactly one candidate id, or NONE if no skill applies.";

const META_SYSTEM: &str = "You maintain the meta-skill document. Rewrite the \
authoring prior from the recent failure digest. Keep the frontmatter, the \
section layout, and one '## Do' bullet per guidance field. Output only the \
markdown document.";

pub struct RemoteBackend {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    audit: Option<Mutex<std::fs::File>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Result<RemoteBackend, OracleError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| OracleError::Unavailable(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok();
        let audit = match &cfg.audit_log {
            Some(path) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| OracleError::Unavailable(format!("audit log: {e}")))?,
            )),
            None => None,
        };
        Ok(RemoteBackend { cfg, client, api_key, audit })
    }

    fn audit(&self, kind: &str, request: &serde_json::Value, response: &str) {
        if let Some(file) = &self.audit {
            let line = json!({
                "ts": chrono::Utc::now().to_rfc3339(),
                "kind": kind,
                "request": request,
                "response": response,
            });
            let mut file = file.lock().unwrap();
            let _ = writeln!(file, "{line}");
        }
    }

    fn post_json(
        &self,
        path: &str,
        body: &serde_json::Value,
        kind: &str,
    ) -> Result<String, OracleError> {
        let url = format!("{}{}", self.cfg.base_url.trim_end_matches('/'), path);
        let mut last_retryable: Option<OracleError> = None;
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 * (1 << (attempt - 1))));
            }
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Err(e) if e.is_timeout() => {
                    last_retryable = Some(OracleError::Timeout);
                }
                Err(e) if e.is_connect() => {
                    return Err(OracleError::Unavailable(format!("{url}: {e}")));
                }
                Err(e) => {
                    last_retryable = Some(OracleError::Unavailable(e.to_string()));
                }
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| OracleError::Unavailable(e.to_string()))?;
                    if status.as_u16() == 429 {
                        last_retryable = Some(OracleError::RateLimited);
                        continue;
                    }
                    if status.is_server_error() {
                        last_retryable =
                            Some(OracleError::Unavailable(format!("{url}: {status}")));
                        continue;
                    }
                    if !status.is_success() {
                        return Err(OracleError::Unavailable(format!("{url}: {status}")));
                    }
                    self.audit(kind, body, &text);
                    return Ok(text);
                }
            }
        }
        Err(last_retryable.unwrap_or(OracleError::Timeout))
    }

    fn chat(&self, system: &str, user: &str, kind: &str) -> Result<String, OracleError> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": 1.0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let text = self.post_json("/chat/completions", &body, kind)?;
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| OracleError::MalformedResponse(format!("{kind}: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| OracleError::MalformedResponse(format!("{kind}: empty choices")))
    }
}

/// Strip a fenced code block if the model wrapped its output in one.
fn strip_fences(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("```") else { return trimmed };
    let rest = rest.strip_prefix("yaml").or_else(|| rest.strip_prefix("markdown")).unwrap_or(rest);
    let rest = rest.strip_prefix('\n').unwrap_or(rest);
    rest.strip_suffix("```").map(str::trim_end).unwrap_or(rest)
}

fn guidance_block(skill: Option<&Skill>) -> String {
    match skill {
        None => "(no skill injected)".to_string(),
        Some(s) => format!("SKILL {}\n{}", s.id, s.guidance.render()),
    }
}

pub struct RemoteSolver(pub Arc<RemoteBackend>);

impl SolverOracle for RemoteSolver {
    fn solve(
        &self,
        task: &Task,
        skill: Option<&Skill>,
        _ctx: &SolveContext,
    ) -> Result<String, OracleError> {
        let user = format!("TASK: {}\n\nGUIDANCE:\n{}", task.prompt, guidance_block(skill));
        self.0.chat(SOLVER_SYSTEM, &user, "solver")
    }
}

pub struct RemoteGrader(pub Arc<RemoteBackend>);

impl GraderOracle for RemoteGrader {
    fn grade(&self, task: &Task, output: &str) -> Result<bool, OracleError> {
        let user = format!("TASK: {}\n\nSOLUTION:\n{output}\n\nReply PASS or FAIL.", task.prompt);
        let reply = self.0.chat(GRADER_SYSTEM, &user, "grader")?;
        let token = reply.trim().split_whitespace().next().unwrap_or("");
        match token {
            "PASS" => Ok(true),
            "FAIL" => Ok(false),
            other => Err(OracleError::MalformedResponse(format!(
                "grader replied {other:?}, expected PASS or FAIL"
            ))),
        }
    }
}

#[derive(Deserialize)]
struct VerdictYaml {
    attribution: String,
    pattern: String,
    confidence: Option<String>,
    reason: Option<String>,
}

pub struct RemoteCritic(pub Arc<RemoteBackend>);

impl CriticOracle for RemoteCritic {
    fn critique(
        &self,
        capsule: &Capsule,
        task: &Task,
        skill: Option<&Skill>,
    ) -> Result<VerdictDraft, OracleError> {
        let user = format!(
            "TASK: {}\n\n{}\n\nSOLVER OUTPUT:\n{}\n\nGRADER: failed",
            task.prompt,
            guidance_block(skill),
            capsule.solver_output
        );
        let reply = self.0.chat(CRITIC_SYSTEM, &user, "critic")?;
        let parsed: VerdictYaml = serde_yaml::from_str(strip_fences(&reply))
            .map_err(|e| OracleError::MalformedResponse(format!("critic yaml: {e}")))?;
        let attribution = match parsed.attribution.to_ascii_uppercase().as_str() {
            "HELPED" => Attribution::Helped,
            "HURT" => Attribution::Hurt,
            "NEUTRAL" => Attribution::Neutral,
            "INAPPLICABLE" => Attribution::Inapplicable,
            other => {
                return Err(OracleError::MalformedResponse(format!(
                    "critic attribution {other:?} outside the closed set"
                )))
            }
        };
        let confidence = match parsed
            .confidence
            .unwrap_or_else(|| "MEDIUM".to_string())
            .to_ascii_uppercase()
            .as_str()
        {
            "LOW" => Confidence::Low,
            "HIGH" => Confidence::High,
            _ => Confidence::Medium,
        };
        Ok(VerdictDraft {
            attribution,
            pattern: parsed.pattern,
            confidence,
            reason: parsed.reason.unwrap_or_default(),
        })
    }
}

pub struct RemoteSynth(pub Arc<RemoteBackend>);

impl SynthOracle for RemoteSynth {
    fn synthesize(&self, req: &SynthRequest) -> Result<String, OracleError> {
        let user = format!(
            "AUTHORING GUIDANCE: {}\n\nCLUSTER: {}\n\nACTIVE BANK (do not duplicate): {}\n\n\
             OUTPUT: YAML skill under {} characters. The `guidance` field is a mapping of \
             applies_when, key_insight, common_pitfalls, verify_before_returning; populate at \
             least applies_when plus one of key_insight / common_pitfalls.{}",
            req.authoring_guidance,
            req.cluster_digest,
            req.bank_digest,
            req.char_budget,
            if req.attempt > 1 {
                format!(
                    "\nPrevious attempt exceeded the budget; shorten the skill (attempt {}).",
                    req.attempt
                )
            } else {
                String::new()
            }
        );
        let reply = self.0.chat(SYNTH_SYSTEM, &user, "synth")?;
        Ok(strip_fences(&reply).to_string())
    }

    fn rewrite_meta(&self, current: &str, digest: &str) -> Result<String, OracleError> {
        let user = format!("CURRENT META-SKILL:\n{current}\n\nRECENT FAILURE DIGEST:\n{digest}");
        let reply = self.0.chat(META_SYSTEM, &user, "meta")?;
        Ok(strip_fences(&reply).to_string())
    }
}

pub struct RemoteGate(pub Arc<RemoteBackend>);

impl GateOracle for RemoteGate {
    fn adjudicate(
        &self,
        task_text: &str,
        candidates: &[GateCandidate],
    ) -> Result<Option<String>, OracleError> {
        let mut listing = String::new();
        for c in candidates {
            listing.push_str(&format!("- id: {}\n  intent: {}\n  guidance: {}\n", c.id, c.intent, c.guidance));
        }
        let user = format!(
            "TASK: {task_text}\n\nCANDIDATES:\n{listing}\nReply with exactly one id, or NONE."
        );
        let reply = self.0.chat(GATE_SYSTEM, &user, "gate")?;
        let token = reply.trim().split_whitespace().next().unwrap_or("").trim_matches('`');
        if token.eq_ignore_ascii_case("none") || token.is_empty() {
            Ok(None)
        } else {
            Ok(Some(token.to_string()))
        }
    }
}

pub struct RemoteEmbedder {
    backend: Arc<RemoteBackend>,
    cache: Mutex<std::collections::HashMap<String, EmbeddingVector>>,
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, OracleError> {
        let misses: Vec<String> = {
            let cache = self.cache.lock().unwrap();
            texts.iter().filter(|t| !cache.contains_key(*t)).cloned().collect()
        };
        if !misses.is_empty() {
            let body = json!({ "model": self.backend.cfg.embed_model, "input": misses });
            let text = self.backend.post_json("/embeddings", &body, "embed")?;
            let parsed: EmbedResponse = serde_json::from_str(&text)
                .map_err(|e| OracleError::MalformedResponse(format!("embed: {e}")))?;
            if parsed.data.len() != misses.len() {
                return Err(OracleError::MalformedResponse(format!(
                    "embed: {} inputs but {} vectors",
                    misses.len(),
                    parsed.data.len()
                )));
            }
            let mut cache = self.cache.lock().unwrap();
            for (input, datum) in misses.iter().zip(parsed.data) {
                if datum.embedding.len() != self.backend.cfg.embed_dim {
                    return Err(OracleError::MalformedResponse(format!(
                        "embed: dimension {} != declared {}",
                        datum.embedding.len(),
                        self.backend.cfg.embed_dim
                    )));
                }
                if datum.embedding.iter().all(|v| *v == 0.0) {
                    return Err(OracleError::MalformedResponse(
                        "embed: all-zero vector rejected".to_string(),
                    ));
                }
                cache.insert(input.clone(), EmbeddingVector(datum.embedding));
            }
        }
        let cache = self.cache.lock().unwrap();
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }

    fn dim(&self) -> usize {
        self.backend.cfg.embed_dim
    }
}

/// Build the full oracle set against one endpoint.
pub fn remote_oracles(cfg: RemoteConfig) -> Result<Oracles, OracleError> {
    let backend = Arc::new(RemoteBackend::new(cfg)?);
    Ok(Oracles {
        solver: Arc::new(RemoteSolver(Arc::clone(&backend))),
        grader: Arc::new(RemoteGrader(Arc::clone(&backend))),
        critic: Arc::new(RemoteCritic(Arc::clone(&backend))),
        synth: Arc::new(RemoteSynth(Arc::clone(&backend))),
        gate: Arc::new(RemoteGate(Arc::clone(&backend))),
        embedder: Arc::new(RemoteEmbedder {
            backend,
            cache: Mutex::new(std::collections::HashMap::new()),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::Split;
    use std::io::{BufRead, BufReader, Read, Write as IoWrite};
    use std::net::TcpListener;

    /// Minimal scripted HTTP server: serves the queued (status, body)
    /// responses in order, one per request, then closes.
    struct StubServer {
        addr: String,
        handle: Option<std::thread::JoinHandle<Vec<String>>>,
    }

    impl StubServer {
        fn start(responses: Vec<(u16, String)>) -> StubServer {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            let addr = format!("http://{}", listener.local_addr().unwrap());
            let handle = std::thread::spawn(move || {
                let mut bodies = Vec::new();
                for (status, body) in responses {
                    let (mut stream, _) = listener.accept().unwrap();
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut content_length = 0usize;
                    loop {
                        let mut line = String::new();
                        reader.read_line(&mut line).unwrap();
                        let line = line.trim_end();
                        if line.is_empty() {
                            break;
                        }
                        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                            content_length = v.trim().parse().unwrap();
                        }
                    }
                    let mut body_buf = vec![0u8; content_length];
                    reader.read_exact(&mut body_buf).unwrap();
                    bodies.push(String::from_utf8(body_buf).unwrap());
                    let reason = if status == 200 { "OK" } else { "X" };
                    let response = format!(
                        "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                        body.len()
                    );
                    stream.write_all(response.as_bytes()).unwrap();
                }
                bodies
            });
            StubServer { addr, handle: Some(handle) }
        }

        fn requests(mut self) -> Vec<String> {
            self.handle.take().unwrap().join().unwrap()
        }
    }

    fn backend_for(addr: &str) -> Arc<RemoteBackend> {
        let cfg = RemoteConfig {
            base_url: addr.to_string(),
            timeout_secs: 5,
            max_retries: 2,
            embed_dim: 3,
            ..Default::default()
        };
        Arc::new(RemoteBackend::new(cfg).unwrap())
    }

    fn chat_body(content: &str) -> String {
        serde_json::to_string(&json!({
            "choices": [{"message": {"content": content}}]
        }))
        .unwrap()
    }

    fn task() -> Task {
        Task {
            task_id: "t1".to_string(),
            prompt: "compute the thing".to_string(),
            split: Split::Train,
            suite: "s".to_string(),
        }
    }

    #[test]
    fn solver_round_trip_through_stub() {
        let server = StubServer::start(vec![(200, chat_body("def solve(): ..."))]);
        let backend = backend_for(&server.addr);
        let solver = RemoteSolver(backend);
        let ctx = SolveContext { run_seed: 0, round: 0, split: Split::Train };
        let out = solver.solve(&task(), None, &ctx).unwrap();
        assert_eq!(out, "def solve(): ...");
        let reqs = server.requests();
        assert!(reqs[0].contains("compute the thing"));
        assert!(reqs[0].contains("chat") == false); // path not in body
    }

    #[test]
    fn rate_limited_then_success_retries_once() {
        let server = StubServer::start(vec![
            (429, "{\"error\": \"slow down\"}".to_string()),
            (200, chat_body("PASS")),
        ]);
        let backend = backend_for(&server.addr);
        let grader = RemoteGrader(backend);
        assert!(grader.grade(&task(), "output").unwrap());
        assert_eq!(server.requests().len(), 2);
    }

    #[test]
    fn retries_exhausted_surfaces_rate_limit() {
        let server = StubServer::start(vec![
            (429, "{}".to_string()),
            (429, "{}".to_string()),
            (429, "{}".to_string()),
        ]);
        let backend = backend_for(&server.addr);
        let grader = RemoteGrader(backend);
        assert_eq!(grader.grade(&task(), "output").unwrap_err(), OracleError::RateLimited);
        server.requests();
    }

    #[test]
    fn critic_parses_yaml_and_rejects_out_of_set_labels() {
        let good = "attribution: HURT\npattern: wrong comparator\nconfidence: HIGH\nreason: misled";
        let server = StubServer::start(vec![
            (200, chat_body(good)),
            (200, chat_body("attribution: MAYBE\npattern: x")),
            (200, chat_body("not: [valid")),
        ]);
        let backend = backend_for(&server.addr);
        let critic = RemoteCritic(backend);
        let capsule = Capsule {
            capsule_id: "c".into(),
            task_id: "t1".into(),
            skill_id: None,
            split: Split::Train,
            round: 0,
            passed: false,
            solver_output: "FAIL".into(),
            created_at: chrono::DateTime::UNIX_EPOCH,
        };
        let draft = critic.critique(&capsule, &task(), None).unwrap();
        assert_eq!(draft.attribution, Attribution::Hurt);
        assert_eq!(draft.pattern, "wrong comparator");
        assert!(matches!(
            critic.critique(&capsule, &task(), None).unwrap_err(),
            OracleError::MalformedResponse(_)
        ));
        assert!(matches!(
            critic.critique(&capsule, &task(), None).unwrap_err(),
            OracleError::MalformedResponse(_)
        ));
        server.requests();
    }

    #[test]
    fn synth_strips_code_fences() {
        let fenced = "```yaml\nid: from_remote\nname: n\nintent: i\ndescription: d\nguidance:\n  applies_when: w\n  key_insight: k\n```";
        let server = StubServer::start(vec![(200, chat_body(fenced))]);
        let backend = backend_for(&server.addr);
        let synth = RemoteSynth(backend);
        let req = SynthRequest {
            authoring_guidance: "",
            canonical_pattern: "p",
            cluster_digest: "d",
            bank_digest: "",
            char_budget: 1500,
            attempt: 1,
        };
        let yaml = synth.synthesize(&req).unwrap();
        let skill = crate::skill::validate_skill(&yaml, 1500, chrono::DateTime::UNIX_EPOCH).unwrap();
        assert_eq!(skill.id, "from_remote");
        server.requests();
    }

    #[test]
    fn gate_parses_id_or_none() {
        let server = StubServer::start(vec![
            (200, chat_body("skill_a")),
            (200, chat_body("NONE")),
        ]);
        let backend = backend_for(&server.addr);
        let gate = RemoteGate(backend);
        let candidates = vec![GateCandidate {
            id: "skill_a".into(),
            intent: "i".into(),
            guidance: "g".into(),
        }];
        assert_eq!(gate.adjudicate("t", &candidates).unwrap().as_deref(), Some("skill_a"));
        assert_eq!(gate.adjudicate("t", &candidates).unwrap(), None);
        server.requests();
    }

    #[test]
    fn embedder_validates_dimension_and_caches() {
        let ok = serde_json::to_string(&json!({
            "data": [{"embedding": [0.1, 0.2, 0.3]}]
        }))
        .unwrap();
        let server = StubServer::start(vec![(200, ok)]);
        let backend = backend_for(&server.addr);
        let embedder = RemoteEmbedder {
            backend,
            cache: Mutex::new(std::collections::HashMap::new()),
        };
        let v = embedder.embed_one("hello").unwrap();
        assert_eq!(v.dim(), 3);
        // second call hits the cache; the stub has no more responses, so a
        // real request would hang/fail
        let again = embedder.embed_one("hello").unwrap();
        assert_eq!(again, v);
        assert_eq!(server.requests().len(), 1);

        let bad_dim = serde_json::to_string(&json!({
            "data": [{"embedding": [0.1, 0.2]}]
        }))
        .unwrap();
        let server = StubServer::start(vec![(200, bad_dim)]);
        let backend = backend_for(&server.addr);
        let embedder = RemoteEmbedder {
            backend,
            cache: Mutex::new(std::collections::HashMap::new()),
        };
        assert!(matches!(
            embedder.embed_one("x").unwrap_err(),
            OracleError::MalformedResponse(_)
        ));
        server.requests();
    }
}
