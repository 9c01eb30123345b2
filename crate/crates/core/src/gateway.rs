//! Text-model gateway used for adverse-event extraction and terminology
//! matching.
//!
//! The wire format is a chat-style JSON completion request. Three
//! implementations are provided: [`HttpGateway`] for a live endpoint,
//! [`StubGateway`] with canned responses (used by every test and by the
//! bundled fixture corpus), and [`CachingGateway`], which wraps either one
//! with a content-addressed [`ReplayCache`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::{self, sha256_hex};

pub const DEFAULT_SYSTEM_PROMPT: &str = "Expert assistant for structured data extraction";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint: String,
    pub model_id: String,
    /// Must be exactly 0.0 for pipeline runs.
    pub temperature: f64,
    /// Context window in tokens; candidate lists are batched to fit.
    pub max_context: usize,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub system_prompt: String,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.deepseek.com/chat/completions".into(),
            model_id: "deepseek-chat".into(),
            temperature: 0.0,
            max_context: 128_000,
            api_key_env: "DEEPSEEK_API_KEY".into(),
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
            max_attempts: 3,
            backoff_ms: 1000,
        }
    }
}

impl GatewayConfig {
    pub fn validate_for_pipeline(&self) -> Result<(), String> {
        if self.temperature != 0.0 {
            return Err(format!("temperature must be 0.0 for deterministic runs, got {}", self.temperature));
        }
        if self.max_context == 0 {
            return Err("max_context must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ExtractAes,
    PredictSocs,
    SelectPt,
}

/// One gateway call. `subject` is the text being worked on (section text or
/// term); the stub keys its answers on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GatewayRequest {
    pub task: Task,
    pub subject: String,
    pub user_prompt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body sent to the completion endpoint. No penalty parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub stream: bool,
}

impl ChatRequest {
    pub fn build(req: &GatewayRequest, cfg: &GatewayConfig) -> Self {
        Self {
            model: cfg.model_id.clone(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: cfg.system_prompt.clone(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: req.user_prompt.clone(),
                },
            ],
            temperature: cfg.temperature,
            stream: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("gateway unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("API key variable {0} is not set")]
    MissingApiKey(String),
    #[error("malformed gateway reply: {0}")]
    BadReply(String),
}

pub trait TextGateway: Send + Sync {
    fn complete(&self, req: &GatewayRequest, cfg: &GatewayConfig) -> Result<String, GatewayError>;
}

impl<G: TextGateway + ?Sized> TextGateway for &G {
    fn complete(&self, req: &GatewayRequest, cfg: &GatewayConfig) -> Result<String, GatewayError> {
        (**self).complete(req, cfg)
    }
}

impl<G: TextGateway + ?Sized> TextGateway for Box<G> {
    fn complete(&self, req: &GatewayRequest, cfg: &GatewayConfig) -> Result<String, GatewayError> {
        (**self).complete(req, cfg)
    }
}

/// Renders a prompt template, replacing `{{name}}` placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

/// Chat-completion endpoint over HTTP.
pub struct HttpGateway {
    client: reqwest::blocking::Client,
}

impl HttpGateway {
    pub fn new() -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| GatewayError::Unavailable {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self { client })
    }

    fn attempt(&self, body: &ChatRequest, cfg: &GatewayConfig, key: &str) -> Result<String, (bool, String)> {
        let resp = self
            .client
            .post(&cfg.endpoint)
            .bearer_auth(key)
            .json(body)
            .send()
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| (true, e.to_string()))?;
        if !status.is_success() {
            let transient = status.is_server_error() || status.as_u16() == 429;
            return Err((transient, format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| (false, e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| (false, format!("no choices[0].message.content in {}", truncate(&text, 200))))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl TextGateway for HttpGateway {
    fn complete(&self, req: &GatewayRequest, cfg: &GatewayConfig) -> Result<String, GatewayError> {
        let key = std::env::var(&cfg.api_key_env).map_err(|_| GatewayError::MissingApiKey(cfg.api_key_env.clone()))?;
        let body = ChatRequest::build(req, cfg);
        let attempts = cfg.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(Duration::from_millis(cfg.backoff_ms << (attempt - 2)));
            }
            match self.attempt(&body, cfg, &key) {
                Ok(content) => return Ok(content),
                Err((false, message)) => return Err(GatewayError::BadReply(message)),
                Err((true, message)) => {
                    tracing::warn!(attempt, %message, "gateway call failed");
                    last = message;
                }
            }
        }
        Err(GatewayError::Unavailable {
            attempts,
            message: last,
        })
    }
}

/// A canned answer. A rule with no matcher matches every request of its
/// task (or of every task, when `task` is also absent).
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct StubRule {
    pub task: Option<Task>,
    /// Exact subject, compared case-insensitively after trimming.
    pub subject: Option<String>,
    pub subject_contains: Option<String>,
    pub subject_sha256: Option<String>,
    pub response: String,
    /// When set, the call fails with this message instead.
    pub error: Option<String>,
}

impl StubRule {
    fn matches(&self, req: &GatewayRequest) -> bool {
        if self.task.is_some_and(|t| t != req.task) {
            return false;
        }
        let subject = req.subject.trim();
        self.subject
            .as_deref()
            .is_none_or(|s| s.trim().eq_ignore_ascii_case(subject))
            && self
                .subject_contains
                .as_deref()
                .is_none_or(|s| req.subject.to_lowercase().contains(&s.to_lowercase()))
            && self
                .subject_sha256
                .as_deref()
                .is_none_or(|h| h.eq_ignore_ascii_case(&sha256_hex(req.subject.as_bytes())))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StubSpec {
    pub rules: Vec<StubRule>,
}

/// Answers from an ordered rule list; the first matching rule wins and an
/// unmatched request gets an empty reply. Counts calls per task.
#[derive(Debug, Default)]
pub struct StubGateway {
    rules: Vec<StubRule>,
    calls: Mutex<BTreeMap<Task, usize>>,
}

impl StubGateway {
    pub fn new(rules: Vec<StubRule>) -> Self {
        Self {
            rules,
            calls: Mutex::new(BTreeMap::new()),
        }
    }

    /// Reply `response` to every request.
    pub fn constant(response: &str) -> Self {
        Self::new(vec![StubRule {
            response: response.into(),
            ..StubRule::default()
        }])
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: StubSpec =
            serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self::new(spec.rules))
    }

    pub fn calls(&self, task: Task) -> usize {
        self.calls.lock().expect("stub poisoned").get(&task).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> usize {
        self.calls.lock().expect("stub poisoned").values().sum()
    }
}

impl TextGateway for StubGateway {
    fn complete(&self, req: &GatewayRequest, _cfg: &GatewayConfig) -> Result<String, GatewayError> {
        *self.calls.lock().expect("stub poisoned").entry(req.task).or_default() += 1;
        match self.rules.iter().find(|r| r.matches(req)) {
            Some(StubRule { error: Some(msg), .. }) => Err(GatewayError::Unavailable {
                attempts: 1,
                message: msg.clone(),
            }),
            Some(rule) => Ok(rule.response.clone()),
            None => Ok(String::new()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    response: String,
    response_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheLookup {
    Hit(String),
    Miss,
    /// Entry existed but failed validation; treated as a miss.
    Corrupt(String),
}

/// Content-addressed store of gateway replies, one JSON file per key.
/// Writes go through a rename, so concurrent readers never see partial
/// entries.
#[derive(Debug, Clone)]
pub struct ReplayCache {
    dir: PathBuf,
}

impl ReplayCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Key over everything that can change a reply: task, prompt and wire
    /// request (model, temperature, prompts including the section text).
    pub fn key(req: &GatewayRequest, cfg: &GatewayConfig) -> String {
        let material = serde_json::json!({
            "task": req.task,
            "request": ChatRequest::build(req, cfg),
        });
        sha256_hex(material.to_string().as_bytes())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2.min(key.len())]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> CacheLookup {
        let path = self.path(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return CacheLookup::Miss,
            Err(e) => return CacheLookup::Corrupt(format!("{}: {e}", path.display())),
        };
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key && entry.response_sha256 == sha256_hex(entry.response.as_bytes()) => {
                CacheLookup::Hit(entry.response)
            }
            Ok(_) => CacheLookup::Corrupt(format!("{}: checksum or key mismatch", path.display())),
            Err(e) => CacheLookup::Corrupt(format!("{}: {e}", path.display())),
        }
    }

    pub fn put(&self, key: &str, response: &str) -> std::io::Result<()> {
        let entry = CacheEntry {
            key: key.to_string(),
            response: response.to_string(),
            response_sha256: sha256_hex(response.as_bytes()),
        };
        let path = self.path(key);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let bytes = serde_json::to_vec_pretty(&entry).expect("entry serializes");
        fsutil::write_if_changed(&path, &bytes).map(|_| ())
    }
}

/// Serves replies from a [`ReplayCache`], calling the inner gateway only on
/// a miss. Failed calls are not cached.
pub struct CachingGateway<G> {
    inner: G,
    cache: ReplayCache,
    live_calls: AtomicUsize,
    warnings: Mutex<Vec<String>>,
}

impl<G: TextGateway> CachingGateway<G> {
    pub fn new(inner: G, cache: ReplayCache) -> Self {
        Self {
            inner,
            cache,
            live_calls: AtomicUsize::new(0),
            warnings: Mutex::new(Vec::new()),
        }
    }

    pub fn live_calls(&self) -> usize {
        self.live_calls.load(Ordering::SeqCst)
    }

    pub fn take_warnings(&self) -> Vec<String> {
        std::mem::take(&mut *self.warnings.lock().expect("warnings poisoned"))
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

impl<G: TextGateway> TextGateway for CachingGateway<G> {
    fn complete(&self, req: &GatewayRequest, cfg: &GatewayConfig) -> Result<String, GatewayError> {
        let key = ReplayCache::key(req, cfg);
        match self.cache.get(&key) {
            CacheLookup::Hit(response) => return Ok(response),
            CacheLookup::Miss => {}
            CacheLookup::Corrupt(why) => {
                tracing::warn!(%why, "corrupt cache entry replaced");
                self.warnings.lock().expect("warnings poisoned").push(format!("corrupt cache entry: {why}"));
            }
        }
        self.live_calls.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(req, cfg)?;
        if let Err(e) = self.cache.put(&key, &response) {
            tracing::warn!("cannot write cache entry: {e}");
            self.warnings.lock().expect("warnings poisoned").push(format!("cache write failed: {e}"));
        }
        Ok(response)
    }
}
