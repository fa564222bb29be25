//! Text-generation backends: an OpenAI-compatible HTTP client and a
//! deterministic replay store keyed by prompt digest.
//!
//! Live completions can be recorded into a replay fixture as they arrive,
//! turning any run into an offline regression input.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_API_KEY_ENV: &str = "EL_API_KEY";

/// Hex SHA-256 of a prompt or completion text.
pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
}

/// Request/response contract spoken by the HTTP backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireFormat {
    /// `POST /completions`, `prompt` in, `choices[0].text` out.
    Completions,
    /// `POST /chat/completions`, one user message, `choices[0].message.content` out.
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub fixture: Option<PathBuf>,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    pub api_key_env: String,
    pub parallelism: usize,
    pub wire: WireFormat,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Replay,
            endpoint: None,
            fixture: None,
            model_id: String::new(),
            temperature: 0.0,
            max_output_tokens: 512,
            request_timeout_secs: 60,
            max_retries: 3,
            retry_base_delay_ms: 500,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            parallelism: 4,
            wire: WireFormat::Completions,
        }
    }
}

impl BackendConfig {
    pub fn http(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint: Some(endpoint.into()),
            model_id: model_id.into(),
            ..Self::default()
        }
    }

    pub fn replay(fixture: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Replay,
            fixture: Some(fixture.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Config(m.to_string()));
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be >= 1");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be >= 1");
        }
        match self.kind {
            BackendKind::Http if self.endpoint.is_none() => bad("http backend needs an endpoint"),
            BackendKind::Http if self.model_id.is_empty() => bad("http backend needs a model_id"),
            BackendKind::Replay if self.fixture.is_none() => bad("replay backend needs a fixture path"),
            _ => Ok(()),
        }
    }

    /// Stable digest of the configuration, for run manifests.
    pub fn digest(&self) -> String {
        text_digest(&serde_json::to_string(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendMeta {
    pub model_id: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub prompt_digest: String,
    pub raw_text: String,
    /// Digest of `raw_text` taken on receipt.
    pub text_digest: String,
    pub backend_meta: BackendMeta,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("credential variable `{0}` is not set")]
    MissingCredential(String),
    #[error("endpoint unreachable after {attempts} attempt(s): {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("no recorded completion for prompt digest {digest}")]
    ReplayMiss { digest: String },
    #[error("fixture {path}: {message}")]
    Fixture { path: String, message: String },
}

impl BackendError {
    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Config(_) => "config",
            BackendError::MissingCredential(_) => "missing-credential",
            BackendError::Unreachable { .. } => "unreachable",
            BackendError::HttpStatus { .. } => "http-status",
            BackendError::MalformedResponse(_) => "malformed-response",
            BackendError::ReplayMiss { .. } => "replay-miss",
            BackendError::Fixture { .. } => "fixture",
        }
    }

    /// Errors that make every request fail and should abort a batch.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            BackendError::Config(_) | BackendError::MissingCredential(_) | BackendError::Fixture { .. }
        )
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<Completion, BackendError>;

    fn model_id(&self) -> &str;
}

/// One line of a replay fixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub digest: String,
    pub prompt: String,
    pub raw_text: String,
    pub model_id: String,
}

impl FixtureEntry {
    pub fn new(prompt: &str, raw_text: &str, model_id: &str) -> Self {
        Self {
            digest: text_digest(prompt),
            prompt: prompt.to_string(),
            raw_text: raw_text.to_string(),
            model_id: model_id.to_string(),
        }
    }
}

/// Read-only prompt-digest → completion store.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    entries: HashMap<String, FixtureEntry>,
    model_id: String,
}

impl ReplayBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = FixtureEntry>, model_id: &str) -> Self {
        let entries = entries
            .into_iter()
            .filter(|e| model_id.is_empty() || e.model_id == model_id)
            .map(|e| (e.digest.clone(), e))
            .collect();
        Self {
            entries,
            model_id: model_id.to_string(),
        }
    }

    /// Load a JSONL fixture. When `model_id` is non-empty only entries for
    /// that model are kept. Later lines override earlier ones.
    pub fn load(path: &Path, model_id: &str) -> Result<Self, BackendError> {
        let fixture_err = |message: String| BackendError::Fixture {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| fixture_err(e.to_string()))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry =
                serde_json::from_str(line).map_err(|e| fixture_err(format!("line {}: {e}", i + 1)))?;
            if entry.digest != text_digest(&entry.prompt) {
                return Err(fixture_err(format!("line {}: digest does not match prompt", i + 1)));
            }
            entries.push(entry);
        }
        Ok(Self::from_entries(entries, model_id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, prompt: &str) -> Result<Completion, BackendError> {
        let digest = text_digest(prompt);
        let entry = self
            .entries
            .get(&digest)
            .ok_or_else(|| BackendError::ReplayMiss { digest: digest.clone() })?;
        Ok(Completion {
            prompt_digest: digest,
            text_digest: text_digest(&entry.raw_text),
            raw_text: entry.raw_text.clone(),
            backend_meta: BackendMeta {
                model_id: entry.model_id.clone(),
                latency_ms: 0,
                prompt_tokens: None,
                completion_tokens: None,
            },
        })
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

/// OpenAI-compatible HTTP client with bounded exponential-backoff retries.
pub struct HttpBackend {
    cfg: BackendConfig,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| BackendError::MissingCredential(cfg.api_key_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.request_timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { cfg, api_key, client })
    }

    fn url(&self) -> String {
        let base = self.cfg.endpoint.as_deref().unwrap_or_default().trim_end_matches('/');
        match self.cfg.wire {
            WireFormat::Completions => format!("{base}/completions"),
            WireFormat::Chat => format!("{base}/chat/completions"),
        }
    }

    /// JSON body sent for `prompt`.
    pub fn request_body(&self, prompt: &str) -> Value {
        let mut body = json!({
            "model": self.cfg.model_id,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_output_tokens,
        });
        match self.cfg.wire {
            WireFormat::Completions => body["prompt"] = json!(prompt),
            WireFormat::Chat => body["messages"] = json!([{"role": "user", "content": prompt}]),
        }
        body
    }

    fn extract_text(&self, body: &Value) -> Result<String, BackendError> {
        let pointer = match self.cfg.wire {
            WireFormat::Completions => "/choices/0/text",
            WireFormat::Chat => "/choices/0/message/content",
        };
        body.pointer(pointer)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::MalformedResponse(format!("no string at {pointer}")))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.cfg.retry_base_delay_ms.saturating_mul(1 << attempt.min(16)))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: &str) -> Result<Completion, BackendError> {
        let body = self.request_body(prompt);
        let url = self.url();
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            let result = self.client.post(&url).bearer_auth(&self.api_key).json(&body).send();
            let failure = match result {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let value: Value = resp
                            .json()
                            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
                        let raw_text = self.extract_text(&value)?;
                        return Ok(Completion {
                            prompt_digest: text_digest(prompt),
                            text_digest: text_digest(&raw_text),
                            raw_text,
                            backend_meta: BackendMeta {
                                model_id: value
                                    .get("model")
                                    .and_then(Value::as_str)
                                    .unwrap_or(&self.cfg.model_id)
                                    .to_string(),
                                latency_ms: started.elapsed().as_millis() as u64,
                                prompt_tokens: value.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
                                completion_tokens: value.pointer("/usage/completion_tokens").and_then(Value::as_u64),
                            },
                        });
                    }
                    let code = status.as_u16();
                    let err = BackendError::HttpStatus {
                        status: code,
                        body: resp.text().unwrap_or_default(),
                    };
                    if !(code == 429 || status.is_server_error()) {
                        return Err(err);
                    }
                    err
                }
                Err(e) => BackendError::Unreachable {
                    attempts: attempt + 1,
                    message: e.to_string(),
                },
            };
            if attempt >= self.cfg.max_retries {
                return Err(match failure {
                    BackendError::Unreachable { message, .. } => BackendError::Unreachable {
                        attempts: attempt + 1,
                        message,
                    },
                    other => other,
                });
            }
            thread::sleep(self.backoff(attempt));
            attempt += 1;
        }
    }

    fn model_id(&self) -> &str {
        &self.cfg.model_id
    }
}

/// Wraps a backend and appends every successful completion to a replay
/// fixture. Appends are serialized.
pub struct Recorder<B> {
    inner: B,
    sink: Mutex<File>,
    path: PathBuf,
}

impl<B: Backend> Recorder<B> {
    pub fn new(inner: B, fixture_path: &Path) -> Result<Self, BackendError> {
        let sink = OpenOptions::new()
            .create(true)
            .append(true)
            .open(fixture_path)
            .map_err(|e| BackendError::Fixture {
                path: fixture_path.display().to_string(),
                message: e.to_string(),
            })?;
        Ok(Self {
            inner,
            sink: Mutex::new(sink),
            path: fixture_path.to_path_buf(),
        })
    }
}

impl<B: Backend> Backend for Recorder<B> {
    fn complete(&self, prompt: &str) -> Result<Completion, BackendError> {
        let completion = self.inner.complete(prompt)?;
        let entry = FixtureEntry::new(prompt, &completion.raw_text, &completion.backend_meta.model_id);
        let line = serde_json::to_string(&entry).expect("fixture entry serializes");
        let mut sink = self.sink.lock().expect("recorder lock");
        writeln!(sink, "{line}").map_err(|e| BackendError::Fixture {
            path: self.path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(completion)
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}

/// Build the backend described by `cfg`.
pub fn open_backend(cfg: &BackendConfig) -> Result<Box<dyn Backend>, BackendError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        BackendKind::Http => Box::new(HttpBackend::new(cfg.clone())?),
        BackendKind::Replay => Box::new(ReplayBackend::load(
            cfg.fixture.as_deref().expect("validated"),
            &cfg.model_id,
        )?),
    })
}

/// Single prompt against the backend described by `cfg`.
pub fn complete(cfg: &BackendConfig, prompt: &str) -> Result<Completion, BackendError> {
    open_backend(cfg)?.complete(prompt)
}

/// Run `prompts` with at most `parallelism` requests in flight. Results are
/// in input order; per-prompt failures are returned in place.
pub fn batch_complete(
    backend: &dyn Backend,
    prompts: &[String],
    parallelism: usize,
) -> Vec<Result<Completion, BackendError>> {
    let workers = parallelism.max(1).min(prompts.len());
    if workers <= 1 {
        return prompts.iter().map(|p| backend.complete(p)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Completion, BackendError>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(prompt) = prompts.get(i) else { break };
                let result = backend.complete(prompt);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rameau_fixture() -> (String, ReplayBackend) {
        let prompt = crate::prompt::build_prompt(
            &crate::prompt::PromptTemplate::default(),
            "of Rameau was represented in 1735, it was a balletopera Les Indes galantes.",
        );
        let entry = FixtureEntry::new(&prompt, r#"[{"Entities":{"Rameau":"Jean-Philippe Rameau"}}]"#, "m");
        (prompt, ReplayBackend::from_entries([entry], ""))
    }

    #[test]
    fn replay_returns_recorded_text() {
        let (prompt, backend) = rameau_fixture();
        let c = backend.complete(&prompt).unwrap();
        assert_eq!(c.raw_text, r#"[{"Entities":{"Rameau":"Jean-Philippe Rameau"}}]"#);
        assert_eq!(c.prompt_digest, text_digest(&prompt));
        assert_eq!(c.text_digest, text_digest(&c.raw_text));
        assert_eq!(backend.complete(&prompt).unwrap(), c);
    }

    #[test]
    fn empty_replay_misses() {
        let backend = ReplayBackend::default();
        let err = backend.complete("anything").unwrap_err();
        assert_eq!(err.code(), "replay-miss");
        assert!(!err.is_fatal());
    }

    #[test]
    fn batch_keeps_order_and_failures_in_place() {
        let entries = vec![FixtureEntry::new("a", "A", "m"), FixtureEntry::new("c", "C", "m")];
        let backend = ReplayBackend::from_entries(entries, "m");
        let prompts: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        for par in [1, 2, 4, 8] {
            let out = batch_complete(&backend, &prompts, par);
            assert_eq!(out[0].as_ref().unwrap().raw_text, "A");
            assert_eq!(out[1].as_ref().unwrap_err().code(), "replay-miss");
            assert_eq!(out[2].as_ref().unwrap().raw_text, "C");
        }
        assert!(batch_complete(&backend, &[], 4).is_empty());
    }

    #[test]
    fn model_filter_applies() {
        let entries = vec![FixtureEntry::new("a", "A", "gpt"), FixtureEntry::new("b", "B", "llama")];
        let backend = ReplayBackend::from_entries(entries, "llama");
        assert_eq!(backend.len(), 1);
        assert!(backend.complete("a").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::replay("x").validate().is_ok());
        assert!(BackendConfig {
            fixture: None,
            ..BackendConfig::replay("x")
        }
        .validate()
        .is_err());
        assert!(BackendConfig::http("http://h", "m").validate().is_ok());
        let mut c = BackendConfig::http("http://h", "m");
        c.temperature = -0.1;
        assert!(c.validate().is_err());
        c.temperature = f64::NAN;
        assert!(c.validate().is_err());
        c.temperature = 0.0;
        c.max_output_tokens = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_credential_is_distinct() {
        let mut c = BackendConfig::http("http://127.0.0.1:9", "m");
        c.api_key_env = "TAILINK_TEST_UNSET_KEY_VAR".into();
        let err = HttpBackend::new(c).err().unwrap();
        assert_eq!(err.code(), "missing-credential");
        assert!(err.is_fatal());
    }
}
