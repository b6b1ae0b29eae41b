//! The one boundary to external model services.
//!
//! Every call is a single POST of `{role, task, payload}` answered by
//! `{ok, content}`. The payload always carries a `fingerprint` (a stable hash
//! of the request's identifying material) and the rendered `prompt`, plus the
//! structured fields a server may prefer over the prompt. [`ScriptedMock`]
//! answers by `(role, fingerprint)` lookup, which makes whole pipeline runs
//! reproducible offline.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, Condvar, LazyLock, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{BenchmarkQuestion, Label};
use crate::retrieval::{DenseRetriever, EvidenceSet, RankedList};
use crate::verdict::{parse_verdict, render_verdict, GapAnalysis, Verdict, VerdictError};

pub const TEMPLATE_VERSION: &str = "v1";
const VERIFIER_TEMPLATE: &str = include_str!("../templates/verifier.v1.txt");
const GENERATOR_TEMPLATE: &str = include_str!("../templates/generator.v1.txt");
const PARAMETRIC_TEMPLATE: &str = include_str!("../templates/generator_parametric.v1.txt");
const SELF_ASSESS_TEMPLATE: &str = include_str!("../templates/self_assess.v1.txt");
const DRAFTER_TEMPLATE: &str = include_str!("../templates/drafter.v1.txt");
const NLI_TEMPLATE: &str = include_str!("../templates/nli.v1.txt");

/// Separator placed between premise documents for NLI calls.
pub const PREMISE_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Verifier,
    /// Verifier without alignment training; used when the aligned verifier is
    /// switched off.
    BaseVerifier,
    Generator,
    Nli,
    Embedder,
    DenseSearch,
    PrimaryDrafter,
    AltDrafter,
    SelfAssessor,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("role serializes");
        write!(f, "{}", s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentEndpoint {
    pub role: Role,
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub max_retries: u32,
    /// In-flight request cap; 0 means unlimited.
    #[serde(default)]
    pub max_concurrency: usize,
    /// Expected embedding length. When absent the first response fixes it.
    #[serde(default)]
    pub embedding_dim: Option<usize>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl AgentEndpoint {
    pub fn new(role: Role, model_name: impl Into<String>) -> Self {
        Self {
            role,
            base_url: String::new(),
            model_name: model_name.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: 0,
            max_concurrency: 0,
            embedding_dim: None,
        }
    }

    pub fn with_url(mut self, base_url: impl Into<String>) -> Self {
        self.base_url = base_url.into();
        self
    }

    pub fn with_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_ms == 0 {
            return Err(GatewayError::BadEndpoint(format!("{}: timeout_ms must be > 0", self.model_name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum GatewayError {
    #[error("transport failure calling {role}: {message}")]
    Transport { role: Role, message: String },
    #[error("timeout calling {role}")]
    Timeout { role: Role },
    #[error("unparseable verdict ({reason}): {raw:?}")]
    UnparseableVerdict { raw: String, reason: VerdictError },
    #[error("no answer label found in {0:?}")]
    NoLabelFound(String),
    #[error("bad NLI label {0:?}")]
    BadLabel(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed response from {role}: {message}")]
    BadResponse { role: Role, message: String },
    #[error("no endpoint registered for role {0}")]
    NoEndpoint(Role),
    #[error("bad endpoint: {0}")]
    BadEndpoint(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, GatewayError::Timeout { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub role: Role,
    pub task: String,
    pub payload: Value,
}

impl WireRequest {
    pub fn fingerprint(&self) -> &str {
        self.payload.get("fingerprint").and_then(Value::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireResponse {
    pub ok: bool,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout,
    Unreachable(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, endpoint: &AgentEndpoint, request: &WireRequest) -> Result<WireResponse, TransportFailure>;
}

/// Blocking HTTP transport: POSTs the request as JSON to `base_url`.
pub struct HttpTransport {
    agents: Mutex<HashMap<u64, ureq::Agent>>,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self {
            agents: Mutex::new(HashMap::new()),
        }
    }

    fn agent(&self, timeout_ms: u64) -> ureq::Agent {
        let mut agents = self.agents.lock().unwrap_or_else(|e| e.into_inner());
        agents
            .entry(timeout_ms)
            .or_insert_with(|| {
                ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_millis(timeout_ms)))
                    .http_status_as_error(false)
                    .build()
                    .into()
            })
            .clone()
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn send(&self, endpoint: &AgentEndpoint, request: &WireRequest) -> Result<WireResponse, TransportFailure> {
        let body = serde_json::to_string(request).map_err(|e| TransportFailure::Unreachable(e.to_string()))?;
        let result = self
            .agent(endpoint.timeout_ms)
            .post(&endpoint.base_url)
            .header("content-type", "application/json")
            .send(body.as_str());
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(TransportFailure::Timeout),
            Err(e) => return Err(TransportFailure::Unreachable(e.to_string())),
        };
        let status = response.status();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(TransportFailure::Timeout),
            Err(e) => return Err(TransportFailure::Unreachable(e.to_string())),
        };
        if !status.is_success() {
            return Err(TransportFailure::Unreachable(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| TransportFailure::Unreachable(format!("bad response body: {e}")))
    }
}

/// One line of a mock script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub role: Role,
    /// Request fingerprint, or `*` for the role's default.
    pub fingerprint: String,
    pub responses: Vec<String>,
}

impl ScriptEntry {
    pub fn new(role: Role, fingerprint: impl Into<String>, responses: Vec<String>) -> Self {
        Self {
            role,
            fingerprint: fingerprint.into(),
            responses,
        }
    }
}

/// Response text that makes the mock simulate a timeout.
pub const MOCK_TIMEOUT: &str = "!timeout";
/// Prefix that makes the mock simulate a transport failure.
pub const MOCK_TRANSPORT_ERROR: &str = "!transport";
pub const MOCK_WILDCARD: &str = "*";

/// Deterministic scripted transport keyed by `(role, fingerprint)`.
///
/// Each key holds a response sequence; successive calls with the same key walk
/// the sequence and then repeat its last element.
#[derive(Default)]
pub struct ScriptedMock {
    scripts: BTreeMap<(Role, String), Vec<String>>,
    cursors: Mutex<HashMap<(Role, String), usize>>,
}

impl ScriptedMock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut mock = Self::new();
        for e in entries {
            mock.push(e);
        }
        mock
    }

    /// Later entries for the same key append to the sequence.
    pub fn push(&mut self, entry: ScriptEntry) {
        self.scripts
            .entry((entry.role, entry.fingerprint))
            .or_default()
            .extend(entry.responses);
    }

    pub fn script(&mut self, role: Role, fingerprint: impl Into<String>, responses: &[&str]) -> &mut Self {
        self.push(ScriptEntry::new(role, fingerprint, responses.iter().map(|s| s.to_string()).collect()));
        self
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let file = File::open(path).map_err(|e| GatewayError::BadEndpoint(format!("{}: {e}", path.display())))?;
        let mut mock = Self::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GatewayError::BadEndpoint(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(&line)
                .map_err(|e| GatewayError::BadEndpoint(format!("mock script line {}: {e}", i + 1)))?;
            mock.push(entry);
        }
        Ok(mock)
    }

    fn next(&self, role: Role, fingerprint: &str) -> Option<String> {
        let key = (role, fingerprint.to_string());
        let (key, seq) = match self.scripts.get(&key) {
            Some(seq) => (key, seq),
            None => {
                let wild = (role, MOCK_WILDCARD.to_string());
                let seq = self.scripts.get(&wild)?;
                (wild, seq)
            }
        };
        if seq.is_empty() {
            return None;
        }
        let mut cursors = self.cursors.lock().unwrap_or_else(|e| e.into_inner());
        let c = cursors.entry(key).or_insert(0);
        let out = seq[(*c).min(seq.len() - 1)].clone();
        *c += 1;
        Some(out)
    }
}

impl Transport for ScriptedMock {
    fn send(&self, _endpoint: &AgentEndpoint, request: &WireRequest) -> Result<WireResponse, TransportFailure> {
        let Some(text) = self.next(request.role, request.fingerprint()) else {
            return Err(TransportFailure::Unreachable(format!(
                "no scripted response for {} {}",
                request.role,
                request.fingerprint()
            )));
        };
        if text == MOCK_TIMEOUT {
            return Err(TransportFailure::Timeout);
        }
        if let Some(msg) = text.strip_prefix(MOCK_TRANSPORT_ERROR) {
            return Err(TransportFailure::Unreachable(msg.trim().to_string()));
        }
        Ok(WireResponse { ok: true, content: text })
    }
}

/// Stable hex digest of request-identifying material.
pub fn fingerprint(material: &str) -> String {
    let digest = Sha256::digest(material.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint material per task. Keys deliberately exclude anything that
/// changes across pipeline rounds (augmented query, evidence) so a mock can
/// script round-dependent behavior as a response sequence.
pub mod keys {
    use super::fingerprint;
    use crate::verdict::{render_verdict, Verdict};

    pub fn verify(question: &str) -> String {
        fingerprint(&format!("verify\u{1f}{question}"))
    }

    pub fn generate(question: &str, reasoning: Option<&Verdict>) -> String {
        let r = reasoning.map(render_verdict).unwrap_or_default();
        fingerprint(&format!("generate\u{1f}{question}\u{1f}{r}"))
    }

    /// Generator conditioned on reasoning text that is not a parsed verdict.
    pub fn generate_with_text(question: &str, reasoning: &str) -> String {
        fingerprint(&format!("generate\u{1f}{question}\u{1f}{reasoning}"))
    }

    pub fn self_assess(question: &str) -> String {
        fingerprint(&format!("self_assess\u{1f}{question}"))
    }

    pub fn draft(question: &str, doc_ids: &[String]) -> String {
        fingerprint(&format!("draft\u{1f}{question}\u{1f}{}", doc_ids.join("\u{1e}")))
    }

    pub fn nli(premise: &str, hypothesis: &str) -> String {
        fingerprint(&format!("nli\u{1f}{premise}\u{1f}{hypothesis}"))
    }

    pub fn embed(text: &str) -> String {
        fingerprint(&format!("embed\u{1f}{text}"))
    }

    pub fn dense(model_name: &str, query: &str) -> String {
        fingerprint(&format!("dense\u{1f}{model_name}\u{1f}{query}"))
    }
}

/// Ground rule for turning a model reply into an option label: the earliest
/// of "answer is X", "(X)", or a line starting with "X.".
pub fn extract_answer_label(raw: &str) -> Option<Label> {
    static PATTERNS: LazyLock<[Regex; 3]> = LazyLock::new(|| {
        [
            Regex::new(r"(?i:answer\s+is)\s*:?\s*\(?([A-D])\b").expect("regex"),
            Regex::new(r"\(([A-D])\)").expect("regex"),
            Regex::new(r"(?m)^\s*([A-D])\.").expect("regex"),
        ]
    });
    PATTERNS
        .iter()
        .filter_map(|re| re.captures(raw).map(|c| c.get(1).expect("group 1")))
        .min_by_key(|m| m.start())
        .and_then(|m| m.as_str().parse().ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entail,
    NotEntail,
}

impl NliLabel {
    pub fn parse(raw: &str) -> Result<Self, GatewayError> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "entail" | "entailment" => Ok(NliLabel::Entail),
            "not_entail" | "not entail" | "not_entailment" => Ok(NliLabel::NotEntail),
            _ => Err(GatewayError::BadLabel(raw.to_string())),
        }
    }

    pub fn is_entail(self) -> bool {
        self == NliLabel::Entail
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierOutput {
    pub verdict: Verdict,
    pub gap: Option<GapAnalysis>,
}

/// Verifier reply plus the raw text it was parsed from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifierReply {
    pub output: VerifierOutput,
    pub raw: String,
}

/// Splits a verifier reply into verdict text and the gap-analysis terms that
/// follow a `Gap Analysis:` line.
pub fn split_gap_analysis(raw: &str) -> (&str, Option<GapAnalysis>) {
    static GAP: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"(?im)^[ \t]*(?:medical[ \t]+)?gap[ \t]+analysis[ \t]*:").expect("regex"));
    match GAP.find(raw) {
        None => (raw, None),
        Some(m) => {
            let terms = raw[m.end()..]
                .split([';', '\n'])
                .map(|t| t.trim().trim_start_matches(['-', '*']).trim());
            (&raw[..m.start()], Some(GapAnalysis::new(terms)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub model: String,
    pub task: String,
    pub fingerprint: String,
    pub latency_us: u64,
    pub attempts: u32,
    pub outcome: String,
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.freed.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

fn format_options(question: &BenchmarkQuestion) -> String {
    question
        .options
        .iter()
        .map(|(l, t)| format!("{l}. {t}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn format_documents<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    docs.into_iter()
        .enumerate()
        .map(|(i, (title, text))| {
            if title.is_empty() {
                format!("[Doc {}] {text}", i + 1)
            } else {
                format!("[Doc {}] {title}. {text}", i + 1)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn options_json(question: &BenchmarkQuestion) -> Value {
    json!(question.options.iter().map(|(l, t)| (l.to_string(), t.clone())).collect::<BTreeMap<_, _>>())
}

/// Shareable client for all model roles.
pub struct Gateway {
    endpoints: Vec<AgentEndpoint>,
    transport: Arc<dyn Transport>,
    limits: HashMap<String, Arc<Semaphore>>,
    dims: Mutex<HashMap<String, usize>>,
    log: Mutex<Vec<CallRecord>>,
    /// First retry delay; doubles per attempt.
    pub backoff_base: Duration,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("endpoints", &self.endpoints).finish()
    }
}

impl Gateway {
    pub fn new(endpoints: Vec<AgentEndpoint>, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        let mut limits = HashMap::new();
        for e in &endpoints {
            e.validate()?;
            if e.max_concurrency > 0 {
                limits.insert(endpoint_key(e), Arc::new(Semaphore::new(e.max_concurrency)));
            }
        }
        Ok(Self {
            endpoints,
            transport,
            limits,
            dims: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
            backoff_base: Duration::from_millis(200),
        })
    }

    /// Gateway over a scripted mock with one endpoint per role and no retry
    /// delay. `dense_models` registers that many dense-search endpoints.
    pub fn mocked(mock: ScriptedMock, dense_models: &[&str]) -> Self {
        let mut endpoints: Vec<AgentEndpoint> = [
            (Role::Verifier, "mock-verifier"),
            (Role::BaseVerifier, "mock-base-verifier"),
            (Role::Generator, "mock-generator"),
            (Role::Nli, "mock-nli"),
            (Role::Embedder, "mock-embedder"),
            (Role::PrimaryDrafter, "mock-primary-drafter"),
            (Role::AltDrafter, "mock-alt-drafter"),
            (Role::SelfAssessor, "mock-self-assessor"),
        ]
        .into_iter()
        .map(|(r, m)| AgentEndpoint::new(r, m).with_url("mock://"))
        .collect();
        endpoints.extend(
            dense_models
                .iter()
                .map(|m| AgentEndpoint::new(Role::DenseSearch, *m).with_url("mock://")),
        );
        let mut gw = Self::new(endpoints, Arc::new(mock)).expect("mock endpoints are valid");
        gw.backoff_base = Duration::ZERO;
        gw
    }

    pub fn endpoints(&self) -> &[AgentEndpoint] {
        &self.endpoints
    }

    pub fn endpoint(&self, role: Role) -> Result<&AgentEndpoint, GatewayError> {
        self.endpoints
            .iter()
            .find(|e| e.role == role)
            .ok_or(GatewayError::NoEndpoint(role))
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.endpoints.iter().any(|e| e.role == role)
    }

    pub fn dense_endpoints(&self) -> impl Iterator<Item = &AgentEndpoint> {
        self.endpoints.iter().filter(|e| e.role == Role::DenseSearch)
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn call_count(&self, role: Role) -> usize {
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|c| c.role == role)
            .count()
    }

    /// Sends one request with retry and exponential backoff, returning the
    /// response content.
    pub fn call(&self, endpoint: &AgentEndpoint, task: &str, mut payload: Value, fp: &str) -> Result<String, GatewayError> {
        let role = endpoint.role;
        if let Value::Object(map) = &mut payload {
            map.insert("fingerprint".into(), Value::String(fp.to_string()));
            map.insert("template_version".into(), Value::String(TEMPLATE_VERSION.into()));
            map.insert("model".into(), Value::String(endpoint.model_name.clone()));
        }
        let request = WireRequest {
            role,
            task: task.to_string(),
            payload,
        };
        let _permit = self.limits.get(&endpoint_key(endpoint)).map(|s| s.acquire());
        let started = Instant::now();
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            let err = match self.transport.send(endpoint, &request) {
                Ok(WireResponse { ok: true, content }) => break Ok(content),
                Ok(WireResponse { ok: false, content }) => GatewayError::Transport { role, message: content },
                Err(TransportFailure::Timeout) => GatewayError::Timeout { role },
                Err(TransportFailure::Unreachable(message)) => GatewayError::Transport { role, message },
            };
            if attempts > endpoint.max_retries {
                break Err(err);
            }
            let delay = self.backoff_base.saturating_mul(1 << (attempts - 1).min(16));
            if !delay.is_zero() {
                std::thread::sleep(delay);
            }
        };
        let outcome = match &result {
            Ok(_) => "ok".to_string(),
            Err(e) => e.to_string(),
        };
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(CallRecord {
            role,
            model: endpoint.model_name.clone(),
            task: task.to_string(),
            fingerprint: fp.to_string(),
            latency_us: started.elapsed().as_micros() as u64,
            attempts,
            outcome,
        });
        result
    }

    /// Asks the verifier (`role` is [`Role::Verifier`] or
    /// [`Role::BaseVerifier`]) to judge `evidence`.
    pub fn call_verifier(
        &self,
        role: Role,
        question: &BenchmarkQuestion,
        evidence: &EvidenceSet,
    ) -> Result<VerifierReply, GatewayError> {
        if evidence.is_empty() {
            return Err(GatewayError::InvalidRequest("verifier needs non-empty evidence".into()));
        }
        let endpoint = self.endpoint(role)?;
        let documents = format_documents(evidence.docs.iter().map(|d| (d.title.as_str(), d.text.as_str())));
        let prompt = fill(
            VERIFIER_TEMPLATE,
            &[
                ("question", &question.question),
                ("options", &format_options(question)),
                ("documents", &documents),
            ],
        );
        let payload = json!({
            "prompt": prompt,
            "question": question.question,
            "options": options_json(question),
            "query": evidence.query_text,
            "doc_ids": evidence.doc_ids(),
        });
        let raw = self.call(endpoint, "verify", payload, &keys::verify(&question.question))?;
        let output = parse_verifier_output(&raw, evidence.len())?;
        Ok(VerifierReply { output, raw })
    }

    /// Answers from validated reasoning, or from parametric knowledge when
    /// `reasoning` is `None`.
    pub fn call_generator(&self, question: &BenchmarkQuestion, reasoning: Option<&Verdict>) -> Result<Label, GatewayError> {
        if reasoning.is_some_and(|r| !r.is_cite_reason()) {
            return Err(GatewayError::InvalidRequest("generator reasoning must be CiteReason".into()));
        }
        let rendered = reasoning.map(render_verdict);
        let raw = self.generate_raw(question, rendered.as_deref(), &keys::generate(&question.question, reasoning))?;
        extract_answer_label(&raw).ok_or(GatewayError::NoLabelFound(raw))
    }

    /// Generator conditioned on arbitrary reasoning text.
    pub fn call_generator_text(&self, question: &BenchmarkQuestion, reasoning: &str) -> Result<Label, GatewayError> {
        let raw = self.generate_raw(question, Some(reasoning), &keys::generate_with_text(&question.question, reasoning))?;
        extract_answer_label(&raw).ok_or(GatewayError::NoLabelFound(raw))
    }

    fn generate_raw(&self, question: &BenchmarkQuestion, reasoning: Option<&str>, fp: &str) -> Result<String, GatewayError> {
        let endpoint = self.endpoint(Role::Generator)?;
        let options = format_options(question);
        let prompt = match reasoning {
            Some(r) => fill(
                GENERATOR_TEMPLATE,
                &[("question", &question.question), ("options", &options), ("reasoning", r)],
            ),
            None => fill(PARAMETRIC_TEMPLATE, &[("question", &question.question), ("options", &options)]),
        };
        let payload = json!({
            "prompt": prompt,
            "question": question.question,
            "options": options_json(question),
            "reasoning": reasoning,
        });
        self.call(endpoint, "generate", payload, fp)
    }

    pub fn call_self_assessment(
        &self,
        question: &BenchmarkQuestion,
        decoding: Decoding,
        criteria: &[String],
    ) -> Result<Label, GatewayError> {
        let endpoint = self.endpoint(Role::SelfAssessor)?;
        let prompt = fill(
            SELF_ASSESS_TEMPLATE,
            &[
                ("question", &question.question),
                ("options", &format_options(question)),
                ("criteria", &criteria.join(", ")),
            ],
        );
        let payload = json!({
            "prompt": prompt,
            "question": question.question,
            "options": options_json(question),
            "decoding": decoding,
            "criteria": criteria,
        });
        let raw = self.call(endpoint, "self_assess", payload, &keys::self_assess(&question.question))?;
        extract_answer_label(&raw).ok_or(GatewayError::NoLabelFound(raw))
    }

    /// Raw drafting output from `role` ([`Role::PrimaryDrafter`] or
    /// [`Role::AltDrafter`]) over numbered documents.
    pub fn call_drafter(
        &self,
        role: Role,
        question: &BenchmarkQuestion,
        docs: &[crate::corpus::Document],
    ) -> Result<String, GatewayError> {
        let endpoint = self.endpoint(role)?;
        let doc_ids: Vec<String> = docs.iter().map(|d| d.doc_id.clone()).collect();
        let documents = format_documents(docs.iter().map(|d| (d.title.as_str(), d.text.as_str())));
        let prompt = fill(
            DRAFTER_TEMPLATE,
            &[
                ("question", &question.question),
                ("options", &format_options(question)),
                ("documents", &documents),
            ],
        );
        let payload = json!({
            "prompt": prompt,
            "question": question.question,
            "options": options_json(question),
            "doc_ids": doc_ids,
        });
        self.call(endpoint, "draft", payload, &keys::draft(&question.question, &doc_ids))
    }

    /// Binary entailment of `hypothesis` by the concatenated premises.
    pub fn call_nli(&self, premises: &[&str], hypothesis: &str) -> Result<NliLabel, GatewayError> {
        if premises.is_empty() {
            return Err(GatewayError::InvalidRequest("NLI premise is empty".into()));
        }
        let endpoint = self.endpoint(Role::Nli)?;
        let premise = premises.join(PREMISE_SEPARATOR);
        let prompt = fill(NLI_TEMPLATE, &[("premise", &premise), ("hypothesis", hypothesis)]);
        let payload = json!({ "prompt": prompt, "premise": premise, "hypothesis": hypothesis });
        let raw = self.call(endpoint, "nli", payload, &keys::nli(&premise, hypothesis))?;
        NliLabel::parse(&raw)
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let endpoint = self.endpoint(Role::Embedder)?;
        let raw = self.call(endpoint, "embed", json!({ "text": text }), &keys::embed(text))?;
        let vector: Vec<f64> = serde_json::from_str(&raw).map_err(|e| GatewayError::BadResponse {
            role: Role::Embedder,
            message: e.to_string(),
        })?;
        let expected = match endpoint.embedding_dim {
            Some(d) => d,
            None => *self
                .dims
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .entry(endpoint_key(endpoint))
                .or_insert(vector.len()),
        };
        if vector.len() != expected {
            return Err(GatewayError::DimensionMismatch {
                expected,
                got: vector.len(),
            });
        }
        Ok(vector)
    }

    /// Searches one dense endpoint. Accepts `[[id, score], ...]` or
    /// `[{"doc_id": id, "score": s}, ...]`; entries are stably sorted by
    /// descending score and truncated to `top_n`.
    pub fn dense_search(&self, endpoint: &AgentEndpoint, query: &str, top_n: usize) -> Result<RankedList, GatewayError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Hit {
            Pair(String, f64),
            Object { doc_id: String, score: f64 },
        }
        let raw = self.call(
            endpoint,
            "dense_search",
            json!({ "query": query, "top_n": top_n }),
            &keys::dense(&endpoint.model_name, query),
        )?;
        let bad = |message: String| GatewayError::BadResponse {
            role: Role::DenseSearch,
            message,
        };
        let hits: Vec<Hit> = serde_json::from_str(&raw).map_err(|e| bad(e.to_string()))?;
        let mut entries: Vec<(String, f64)> = hits
            .into_iter()
            .map(|h| match h {
                Hit::Pair(d, s) => (d, s),
                Hit::Object { doc_id, score } => (doc_id, score),
            })
            .collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1));
        entries.truncate(top_n);
        RankedList::new(endpoint.model_name.clone(), entries).map_err(|e| bad(e.to_string()))
    }

    /// Dense retrievers for every registered dense-search endpoint.
    pub fn dense_retrievers(self: &Arc<Self>) -> Vec<Arc<dyn DenseRetriever>> {
        self.dense_endpoints()
            .cloned()
            .map(|endpoint| {
                Arc::new(GatewayDense {
                    gateway: Arc::clone(self),
                    endpoint,
                }) as Arc<dyn DenseRetriever>
            })
            .collect()
    }
}

fn endpoint_key(e: &AgentEndpoint) -> String {
    format!("{}\u{1f}{}", e.role, e.model_name)
}

/// Parses a verifier reply. A refusal must carry a gap analysis; a gap
/// analysis attached to reasoning is dropped.
pub fn parse_verifier_output(raw: &str, num_docs: usize) -> Result<VerifierOutput, GatewayError> {
    let (verdict_text, gap) = split_gap_analysis(raw);
    let verdict = parse_verdict(verdict_text, num_docs).map_err(|reason| GatewayError::UnparseableVerdict {
        raw: raw.to_string(),
        reason,
    })?;
    match verdict {
        Verdict::CiteReason { .. } => Ok(VerifierOutput { verdict, gap: None }),
        Verdict::NegativeKnowledgeAssertion { .. } => match gap {
            Some(g) if !g.is_empty() => Ok(VerifierOutput { verdict, gap: Some(g) }),
            _ => Err(GatewayError::UnparseableVerdict {
                raw: raw.to_string(),
                reason: VerdictError::EmptyVerdict,
            }),
        },
    }
}

pub struct GatewayDense {
    gateway: Arc<Gateway>,
    endpoint: AgentEndpoint,
}

impl DenseRetriever for GatewayDense {
    fn retriever_id(&self) -> &str {
        &self.endpoint.model_name
    }

    fn search(&self, query: &str, top_n: usize) -> Result<RankedList, GatewayError> {
        self.gateway.dense_search(&self.endpoint, query, top_n)
    }
}
