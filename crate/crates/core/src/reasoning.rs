//! Prompt construction, reasoning generation, and the reasoning cache.
//!
//! A reasoning is an explanation of why a document was produced by its
//! (conditioning) source. Training-time prompts condition on the gold
//! label; inference-time prompts condition on a neutral placeholder.
//! Generated reasonings are cached content-addressed so reruns never
//! repeat backend calls.

use std::collections::{HashMap, HashSet};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Document;

/// Version of the prompt template, part of every cache key. Bump on any
/// template change so stale reasonings are regenerated.
pub const TEMPLATE_VERSION: &str = "v1";

/// Conditioning label used when the document's origin is unknown
/// (inference time, or unlabeled rows).
pub const INFERENCE_CONDITIONING: &str = "unknown origin";

const PROMPT_PREFIX: &str = "Why is this particular \"";
const PROMPT_INFIX: &str = "\" generated by ";
const PROMPT_SUFFIX: &str = "?";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("http status {status}: {message}")]
    Http { status: u16, message: String },
    #[error("{0}")]
    Fatal(String),
}

impl BackendError {
    /// Transport failures and throttling/server statuses are worth
    /// retrying; client errors are not.
    pub fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            BackendError::Fatal(_) => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error("document {doc_id} has empty text")]
    EmptyDocument { doc_id: String },
    #[error("backend {backend_id} unavailable for document {doc_id} after {attempts} attempt(s): {source}")]
    BackendUnavailable {
        doc_id: String,
        backend_id: String,
        attempts: u32,
        source: BackendError,
    },
    #[error("backend {backend_id} returned empty reasoning for document {doc_id}")]
    InvalidReasoning { doc_id: String, backend_id: String },
    #[error("reasoning cache line {line}: {message}")]
    CacheCorrupt { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rendered question handed to a generator backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub doc_id: String,
    pub conditioning_label: String,
}

/// Generated explanation attached to a (document, conditioning label) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reasoning {
    pub text: String,
    pub doc_id: String,
    pub conditioning_label: String,
    pub backend_id: String,
    pub created_at: DateTime<Utc>,
}

/// How to pick the conditioning label for a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    /// Teacher-forced: render the gold label (training data).
    Gold,
    /// Label-free placeholder (inference, unlabeled data).
    Inference,
}

/// Resolves the label rendered into the prompt for `doc`.
pub fn conditioning_label_for(doc: &Document, mode: ConditioningMode) -> String {
    match mode {
        ConditioningMode::Inference => INFERENCE_CONDITIONING.to_string(),
        ConditioningMode::Gold => match (doc.label_a, doc.label_b.as_deref()) {
            (Some(0), _) => "human".to_string(),
            (Some(1), Some(b)) => b.to_string(),
            (Some(1), None) => "AI".to_string(),
            _ => INFERENCE_CONDITIONING.to_string(),
        },
    }
}

fn escape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            other => out.push(other),
        }
    }
    out
}

fn unescape_text(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next()? {
                '\\' => out.push('\\'),
                '"' => out.push('"'),
                'n' => out.push('\n'),
                'r' => out.push('\r'),
                _ => return None,
            }
        } else {
            out.push(c);
        }
    }
    Some(out)
}

/// Builds the reasoning prompt for a (document, conditioning label) pair.
///
/// The document is quoted and escaped so the prompt stays a single
/// unambiguous line; [`parse_prompt`] is the exact inverse.
pub fn build_prompt(doc: &Document, label: &str) -> Result<Prompt, ReasoningError> {
    if doc.text.trim().is_empty() {
        return Err(ReasoningError::EmptyDocument { doc_id: doc.id.clone() });
    }
    let text =
        format!("{PROMPT_PREFIX}{}{PROMPT_INFIX}{label}{PROMPT_SUFFIX}", escape_text(&doc.text));
    Ok(Prompt { text, doc_id: doc.id.clone(), conditioning_label: label.to_string() })
}

/// Splits a prompt back into (document text, conditioning label).
/// Returns `None` when the string is not a well-formed prompt.
pub fn parse_prompt(prompt_text: &str) -> Option<(String, String)> {
    let rest = prompt_text.strip_prefix(PROMPT_PREFIX)?;
    let rest = rest.strip_suffix(PROMPT_SUFFIX)?;
    // Find the closing quote of the document part, skipping escapes.
    let bytes = rest.as_bytes();
    let mut i = 0;
    let close = loop {
        if i >= bytes.len() {
            return None;
        }
        match bytes[i] {
            b'\\' => i += 2,
            b'"' => break i,
            _ => i += 1,
        }
    };
    let doc_part = &rest[..close];
    let label = rest[close..].strip_prefix(PROMPT_INFIX)?;
    Some((unescape_text(doc_part)?, label.to_string()))
}

/// Hashes the inputs that determine a reasoning's content.
pub fn cache_key(doc_text: &str, label: &str, backend_id: &str) -> String {
    key_with_version(doc_text, label, backend_id, TEMPLATE_VERSION)
}

fn key_with_version(doc_text: &str, label: &str, backend_id: &str, version: &str) -> String {
    let mut hasher = Sha256::new();
    for part in [doc_text, label, backend_id, version] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// A source of reasoning text.
pub trait GeneratorBackend: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, prompt: &Prompt) -> Result<String, BackendError>;
    /// Timestamp stamped onto new reasonings. Deterministic backends
    /// return a fixed instant so cache artifacts are reproducible.
    fn timestamp(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Retry schedule for transient backend failures.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 2, base_delay_ms: 100, max_delay_ms: 2000 }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// On-disk record for one cache entry.
#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    doc_id: String,
    label: String,
    backend_id: String,
    template_version: String,
    text: String,
    created_at: DateTime<Utc>,
}

/// Content-addressed reasoning store with optional JSONL persistence.
///
/// Reads may proceed concurrently; writes are serialized. Persistence is
/// append-only; when a key repeats in the file, the last entry wins.
pub struct ReasoningCache {
    entries: RwLock<HashMap<String, Reasoning>>,
    writer: Option<Mutex<BufWriter<std::fs::File>>>,
}

impl ReasoningCache {
    /// A cache with no backing file.
    pub fn in_memory() -> Self {
        ReasoningCache { entries: RwLock::new(HashMap::new()), writer: None }
    }

    /// Opens (or creates) a persisted cache at `path`.
    pub fn open(path: &Path) -> Result<Self, ReasoningError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let content = std::fs::read_to_string(path)?;
            for (idx, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord =
                    serde_json::from_str(line).map_err(|e| ReasoningError::CacheCorrupt {
                        line: idx as u64 + 1,
                        message: e.to_string(),
                    })?;
                entries.insert(
                    record.key,
                    Reasoning {
                        text: record.text,
                        doc_id: record.doc_id,
                        conditioning_label: record.label,
                        backend_id: record.backend_id,
                        created_at: record.created_at,
                    },
                );
            }
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ReasoningCache {
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(BufWriter::new(file))),
        })
    }

    pub fn get(&self, key: &str) -> Option<Reasoning> {
        self.entries.read().unwrap().get(key).cloned()
    }

    /// Convenience lookup by the key ingredients.
    pub fn lookup(&self, doc_text: &str, label: &str, backend_id: &str) -> Option<Reasoning> {
        self.get(&cache_key(doc_text, label, backend_id))
    }

    pub fn store(&self, key: String, reasoning: Reasoning) -> Result<(), ReasoningError> {
        if let Some(writer) = &self.writer {
            let record = CacheRecord {
                key: key.clone(),
                doc_id: reasoning.doc_id.clone(),
                label: reasoning.conditioning_label.clone(),
                backend_id: reasoning.backend_id.clone(),
                template_version: TEMPLATE_VERSION.to_string(),
                text: reasoning.text.clone(),
                created_at: reasoning.created_at,
            };
            let line = serde_json::to_string(&record).expect("cache record serializes");
            let mut writer = writer.lock().unwrap();
            writeln!(writer, "{line}")?;
            writer.flush()?;
        }
        self.entries.write().unwrap().insert(key, reasoning);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Returns the reasoning for (doc, label), from cache when present,
/// otherwise from the backend (with retries on transient failures).
/// Successful generations are stored; empty outputs are rejected and
/// never cached.
pub fn generate_reasoning(
    doc: &Document,
    label: &str,
    backend: &dyn GeneratorBackend,
    cache: &ReasoningCache,
    retry: &RetryPolicy,
) -> Result<Reasoning, ReasoningError> {
    let prompt = build_prompt(doc, label)?;
    let key = cache_key(&doc.text, label, backend.id());
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let mut attempt: u32 = 0;
    loop {
        match backend.generate(&prompt) {
            Ok(text) => {
                if text.trim().is_empty() {
                    return Err(ReasoningError::InvalidReasoning {
                        doc_id: doc.id.clone(),
                        backend_id: backend.id().to_string(),
                    });
                }
                let reasoning = Reasoning {
                    text,
                    doc_id: doc.id.clone(),
                    conditioning_label: label.to_string(),
                    backend_id: backend.id().to_string(),
                    created_at: backend.timestamp(),
                };
                cache.store(key, reasoning.clone())?;
                return Ok(reasoning);
            }
            Err(e) if e.retryable() && attempt < retry.max_retries => {
                std::thread::sleep(retry.delay(attempt));
                attempt += 1;
            }
            Err(e) => {
                return Err(ReasoningError::BackendUnavailable {
                    doc_id: doc.id.clone(),
                    backend_id: backend.id().to_string(),
                    attempts: attempt + 1,
                    source: e,
                })
            }
        }
    }
}

/// One failed document in a batch generation pass.
#[derive(Debug, Clone, Serialize)]
pub struct FailedReasoning {
    pub doc_id: String,
    pub error: String,
}

/// Outcome counts for a batch generation pass.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub generated: usize,
    pub cached: usize,
    pub failed: Vec<FailedReasoning>,
}

/// Generates reasonings for every document, running up to `max_inflight`
/// backend calls concurrently. Failures do not abort the batch; the cache
/// retains every success.
pub fn generate_all(
    docs: &[Document],
    mode: ConditioningMode,
    backend: &dyn GeneratorBackend,
    cache: &ReasoningCache,
    retry: &RetryPolicy,
    max_inflight: usize,
) -> CoverageReport {
    enum Outcome {
        Generated,
        Cached,
        Failed(String),
    }
    let n = docs.len();
    let outcomes: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = max_inflight.clamp(1, n.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let doc = &docs[i];
                let label = conditioning_label_for(doc, mode);
                let key = cache_key(&doc.text, &label, backend.id());
                let outcome = if cache.get(&key).is_some() {
                    Outcome::Cached
                } else {
                    match generate_reasoning(doc, &label, backend, cache, retry) {
                        Ok(_) => Outcome::Generated,
                        Err(e) => Outcome::Failed(e.to_string()),
                    }
                };
                outcomes.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    let mut report = CoverageReport { generated: 0, cached: 0, failed: Vec::new() };
    for (doc, outcome) in docs.iter().zip(outcomes.into_inner().unwrap()) {
        match outcome.expect("every index visited") {
            Outcome::Generated => report.generated += 1,
            Outcome::Cached => report.cached += 1,
            Outcome::Failed(error) => {
                report.failed.push(FailedReasoning { doc_id: doc.id.clone(), error })
            }
        }
    }
    report
}

const TTR_THRESHOLD: f64 = 0.5;
const FIRST_PERSON: [&str; 8] = ["i", "me", "my", "mine", "we", "our", "ours", "myself"];

struct TextStats {
    ttr: f64,
    first_person: usize,
    punct_kinds: usize,
}

fn text_stats(text: &str) -> TextStats {
    let mut tokens: Vec<String> = Vec::new();
    for raw in text.split_whitespace() {
        let token: String = raw
            .chars()
            .filter(|c| c.is_alphanumeric() || *c == '\'')
            .collect::<String>()
            .to_lowercase();
        if !token.is_empty() {
            tokens.push(token);
        }
    }
    let distinct: HashSet<&str> = tokens.iter().map(String::as_str).collect();
    let ttr = if tokens.is_empty() { 0.0 } else { distinct.len() as f64 / tokens.len() as f64 };
    let first_person = tokens.iter().filter(|t| FIRST_PERSON.contains(&t.as_str())).count();
    let punct_kinds = ['.', '!', '?'].into_iter().filter(|c| text.contains(*c)).count();
    TextStats { ttr, first_person, punct_kinds }
}

/// Deterministic offline backend: renders reasoning from shallow text
/// statistics and the conditioning label. Same prompt, same output.
pub struct TemplateBackend;

pub const TEMPLATE_BACKEND_ID: &str = "template";

impl GeneratorBackend for TemplateBackend {
    fn id(&self) -> &str {
        TEMPLATE_BACKEND_ID
    }

    fn generate(&self, prompt: &Prompt) -> Result<String, BackendError> {
        let (text, label) = parse_prompt(&prompt.text)
            .ok_or_else(|| BackendError::Fatal("prompt is not in template form".into()))?;
        let stats = text_stats(&text);
        let diversity = if stats.ttr < TTR_THRESHOLD {
            "low lexical diversity with verbatim repetition of identical phrasing"
        } else {
            "varied vocabulary drawing on a wide word range"
        };
        let voice = if stats.first_person > 0 {
            "a clear first-person voice"
        } else {
            "no first-person voice"
        };
        let punct = if stats.punct_kinds >= 2 {
            "mixed terminal punctuation"
        } else {
            "uniform terminal punctuation"
        };
        Ok(format!(
            "The passage shows {diversity}, {voice}, and {punct}. \
             These cues fit {label}."
        ))
    }

    fn timestamp(&self) -> DateTime<Utc> {
        // Fixed instant: template output is deterministic, so its cache
        // artifacts are byte-reproducible across runs.
        DateTime::UNIX_EPOCH
    }
}

/// Renders the deterministic template reasoning for (doc, label) without
/// touching any cache.
pub fn template_reasoning(doc: &Document, label: &str) -> Result<Reasoning, ReasoningError> {
    let prompt = build_prompt(doc, label)?;
    let backend = TemplateBackend;
    let text = backend.generate(&prompt).map_err(|_| ReasoningError::InvalidReasoning {
        doc_id: doc.id.clone(),
        backend_id: TEMPLATE_BACKEND_ID.to_string(),
    })?;
    Ok(Reasoning {
        text,
        doc_id: doc.id.clone(),
        conditioning_label: label.to_string(),
        backend_id: TEMPLATE_BACKEND_ID.to_string(),
        created_at: backend.timestamp(),
    })
}

/// Chat-completion client configuration. The auth token is read from the
/// named environment variable at call time, never stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    pub token_env: Option<String>,
    pub timeout_secs: u64,
}

/// Chat-completion backend (OpenAI-style request/response shape) with
/// temperature pinned to 0.
pub struct HttpBackend {
    id: String,
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(HttpBackend { id: format!("http:{}", config.model), config, client })
    }

    /// The JSON request body sent for `prompt`.
    pub fn request_body(&self, prompt: &Prompt) -> serde_json::Value {
        serde_json::json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt.text}],
        })
    }

    /// Extracts the completion text from a chat response body.
    pub fn parse_response(value: &serde_json::Value) -> Result<String, BackendError> {
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                BackendError::Fatal("response missing choices[0].message.content".into())
            })
    }
}

impl GeneratorBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, prompt: &Prompt) -> Result<String, BackendError> {
        let mut request = self.client.post(&self.config.endpoint).json(&self.request_body(prompt));
        if let Some(var) = &self.config.token_env {
            let token = std::env::var(var)
                .map_err(|_| BackendError::Fatal(format!("auth token env var {var} is not set")))?;
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let message: String =
                response.text().unwrap_or_default().chars().take(200).collect();
            return Err(BackendError::Http { status: status.as_u16(), message });
        }
        let value: serde_json::Value =
            response.json().map_err(|e| BackendError::Transport(e.to_string()))?;
        Self::parse_response(&value)
    }
}
