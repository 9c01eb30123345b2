//! Register page retrieval and parsing of the structured data embedded in
//! product pages.
//!
//! All network access goes through [`Transport`]. [`ReplayTransport`] serves
//! recorded responses from a directory and is what the test suite uses;
//! [`LiveTransport`] talks to the real register.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dates;
use crate::fsutil;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FetchPolicy {
    /// Requests per second, shared by every worker using one limiter.
    pub rate_limit: f64,
    pub max_retries: u32,
    /// Delay before retry `i`; the last entry repeats.
    pub backoff_ms: Vec<u64>,
    pub user_agent: String,
}

impl Default for FetchPolicy {
    fn default() -> Self {
        Self {
            rate_limit: 1.0,
            max_retries: 3,
            backoff_ms: vec![1000, 2000, 4000],
            user_agent: concat!("refset/", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }
}

impl FetchPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rate_limit > 0.0 && self.rate_limit.is_finite()) {
            return Err(format!("rate_limit must be > 0, got {}", self.rate_limit));
        }
        Ok(())
    }

    fn backoff(&self, retry: usize) -> Duration {
        let ms = self
            .backoff_ms
            .get(retry)
            .or(self.backoff_ms.last())
            .copied()
            .unwrap_or(0);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

#[derive(Debug, Error)]
#[error("transport failure for {url}: {message}")]
pub struct TransportError {
    pub url: String,
    pub message: String,
}

pub trait Transport: Send + Sync {
    fn get(&self, url: &str, user_agent: &str) -> Result<HttpResponse, TransportError>;
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("giving up on {url} after {attempts} attempt(s), last status {last_status:?}")]
    Exhausted {
        url: String,
        attempts: u32,
        last_status: Option<u16>,
    },
    #[error("{url} returned {content_type:?}, expected {expected}")]
    Content {
        url: String,
        content_type: Option<String>,
        expected: &'static str,
    },
    #[error("malformed url {0:?}")]
    InvalidUrl(String),
}

/// One fetch attempt, as recorded in the fetch log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FetchRecord {
    pub timestamp: String,
    pub url: String,
    pub attempt: u32,
    pub status: Option<u16>,
    pub outcome: String,
}

/// Minimum spacing between request starts, shared across workers.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / requests_per_second),
            next_slot: Mutex::new(None),
        }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut slot = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let start = slot.map_or(now, |s| s.max(now));
            *slot = Some(start + self.interval);
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    Html,
    Pdf,
    Any,
}

/// Retrieves pages and documents under a [`FetchPolicy`], logging every
/// attempt.
pub struct Fetcher {
    transport: Arc<dyn Transport>,
    policy: FetchPolicy,
    limiter: Arc<RateLimiter>,
    log: Mutex<Vec<FetchRecord>>,
}

impl Fetcher {
    pub fn new(transport: Arc<dyn Transport>, policy: FetchPolicy) -> Self {
        let limiter = Arc::new(RateLimiter::new(policy.rate_limit));
        Self::with_limiter(transport, policy, limiter)
    }

    pub fn with_limiter(transport: Arc<dyn Transport>, policy: FetchPolicy, limiter: Arc<RateLimiter>) -> Self {
        Self {
            transport,
            policy,
            limiter,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn fetch_page(&self, url: &str) -> Result<String, FetchError> {
        let body = self.fetch(url, Expect::Html)?;
        Ok(String::from_utf8_lossy(&body).into_owned())
    }

    pub fn fetch_document(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        self.fetch(url, Expect::Pdf)
    }

    pub fn fetch_bytes(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        self.fetch(url, Expect::Any)
    }

    pub fn take_log(&self) -> Vec<FetchRecord> {
        std::mem::take(&mut *self.log.lock().expect("fetch log poisoned"))
    }

    fn record(&self, url: &str, attempt: u32, status: Option<u16>, outcome: String) {
        tracing::info!(url, attempt, ?status, %outcome, "fetch");
        self.log.lock().expect("fetch log poisoned").push(FetchRecord {
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            url: url.to_string(),
            attempt,
            status,
            outcome,
        });
    }

    fn fetch(&self, url: &str, expect: Expect) -> Result<Vec<u8>, FetchError> {
        if !(url.starts_with("http://") || url.starts_with("https://")) || url.contains(char::is_whitespace) {
            return Err(FetchError::InvalidUrl(url.to_string()));
        }
        let attempts = self.policy.max_retries + 1;
        let mut last_status = None;
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(self.policy.backoff(attempt as usize - 2));
            }
            self.limiter.acquire();
            let transient = match self.transport.get(url, &self.policy.user_agent) {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    if !content_matches(&resp, expect) {
                        self.record(url, attempt, Some(resp.status), "unexpected content type".into());
                        return Err(FetchError::Content {
                            url: url.to_string(),
                            content_type: resp.content_type,
                            expected: match expect {
                                Expect::Html => "text/html",
                                Expect::Pdf => "application/pdf",
                                Expect::Any => "any",
                            },
                        });
                    }
                    self.record(url, attempt, Some(resp.status), "success".into());
                    return Ok(resp.body);
                }
                Ok(resp) => {
                    last_status = Some(resp.status);
                    self.record(url, attempt, Some(resp.status), "http error".into());
                    resp.status >= 500 || resp.status == 429 || resp.status == 408
                }
                Err(e) => {
                    self.record(url, attempt, None, e.message.clone());
                    true
                }
            };
            if !transient {
                return Err(FetchError::Exhausted {
                    url: url.to_string(),
                    attempts: attempt,
                    last_status,
                });
            }
        }
        Err(FetchError::Exhausted {
            url: url.to_string(),
            attempts,
            last_status,
        })
    }
}

fn content_matches(resp: &HttpResponse, expect: Expect) -> bool {
    let ct = resp.content_type.as_deref().unwrap_or("").to_ascii_lowercase();
    match expect {
        Expect::Any => true,
        Expect::Html => ct.contains("html") || (ct.is_empty() && looks_like_html(&resp.body)),
        Expect::Pdf => ct.contains("pdf") || resp.body.starts_with(b"%PDF"),
    }
}

fn looks_like_html(body: &[u8]) -> bool {
    let head = String::from_utf8_lossy(&body[..body.len().min(512)]).to_ascii_lowercase();
    head.contains("<html") || head.contains("<!doctype html")
}

/// Fetches one page with a private rate limiter.
pub fn fetch_page(url: &str, policy: &FetchPolicy, transport: Arc<dyn Transport>) -> Result<String, FetchError> {
    Fetcher::new(transport, policy.clone()).fetch_page(url)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ReplayEntry {
    pub url: String,
    #[serde(default = "ok_status")]
    pub status: u16,
    #[serde(default)]
    pub content_type: Option<String>,
    /// Body file, relative to the replay directory.
    #[serde(default)]
    pub file: Option<String>,
}

fn ok_status() -> u16 {
    200
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReplayManifest {
    pub entries: Vec<ReplayEntry>,
}

pub const REPLAY_MANIFEST: &str = "manifest.json";

/// Serves recorded responses. Unknown URLs answer 404.
#[derive(Debug)]
pub struct ReplayTransport {
    dir: PathBuf,
    entries: HashMap<String, ReplayEntry>,
}

impl ReplayTransport {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(dir.join(REPLAY_MANIFEST))?;
        let manifest: ReplayManifest = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: manifest.entries.into_iter().map(|e| (e.url.clone(), e)).collect(),
        })
    }
}

impl Transport for ReplayTransport {
    fn get(&self, url: &str, _user_agent: &str) -> Result<HttpResponse, TransportError> {
        let Some(entry) = self.entries.get(url) else {
            return Ok(HttpResponse {
                status: 404,
                content_type: None,
                body: Vec::new(),
            });
        };
        let body = match &entry.file {
            Some(file) => std::fs::read(self.dir.join(file)).map_err(|e| TransportError {
                url: url.to_string(),
                message: format!("replay body {file}: {e}"),
            })?,
            None => Vec::new(),
        };
        Ok(HttpResponse {
            status: entry.status,
            content_type: entry.content_type.clone(),
            body,
        })
    }
}

/// Passes requests to an inner transport and records every response into a
/// replay directory.
pub struct RecordingTransport<T> {
    inner: T,
    dir: PathBuf,
    manifest: Mutex<ReplayManifest>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let manifest = match std::fs::read_to_string(dir.join(REPLAY_MANIFEST)) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => ReplayManifest::default(),
        };
        Ok(Self {
            inner,
            dir: dir.to_path_buf(),
            manifest: Mutex::new(manifest),
        })
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn get(&self, url: &str, user_agent: &str) -> Result<HttpResponse, TransportError> {
        let resp = self.inner.get(url, user_agent)?;
        let file = format!("{}.body", &fsutil::sha256_hex(url.as_bytes())[..16]);
        let io_err = |e: std::io::Error| TransportError {
            url: url.to_string(),
            message: format!("recording: {e}"),
        };
        std::fs::write(self.dir.join(&file), &resp.body).map_err(io_err)?;
        let mut manifest = self.manifest.lock().expect("recorder poisoned");
        manifest.entries.retain(|e| e.url != url);
        manifest.entries.push(ReplayEntry {
            url: url.to_string(),
            status: resp.status,
            content_type: resp.content_type.clone(),
            file: Some(file),
        });
        let text = serde_json::to_vec_pretty(&*manifest).expect("manifest serializes");
        fsutil::write_atomic(&self.dir.join(REPLAY_MANIFEST), &text).map_err(io_err)?;
        Ok(resp)
    }
}

/// HTTP transport backed by a blocking reqwest client.
pub struct LiveTransport {
    client: reqwest::blocking::Client,
}

impl LiveTransport {
    pub fn new() -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| TransportError {
                url: String::new(),
                message: e.to_string(),
            })?;
        Ok(Self { client })
    }
}

impl Transport for LiveTransport {
    fn get(&self, url: &str, user_agent: &str) -> Result<HttpResponse, TransportError> {
        let err = |e: reqwest::Error| TransportError {
            url: url.to_string(),
            message: e.to_string(),
        };
        let resp = self
            .client
            .get(url)
            .header(reqwest::header::USER_AGENT, user_agent)
            .send()
            .map_err(err)?;
        let status = resp.status().as_u16();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let body = resp.bytes().map_err(err)?.to_vec();
        Ok(HttpResponse {
            status,
            content_type,
            body,
        })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ProductMetadata {
    pub brand_name: String,
    pub eu_number: String,
    pub inn: String,
    pub mah: String,
    pub indication: String,
    /// ATC block exactly as embedded in the page (JSON text), or empty.
    pub atc_raw: String,
    pub page_url: String,
    /// Authorisation status as shown on the page (e.g. "Authorised",
    /// "Withdrawn").
    pub status: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ProcedureRecord {
    pub procedure_id: String,
    pub procedure_type: String,
    pub ema_number: String,
    pub decision_number: String,
    #[serde(with = "dates::opt_iso")]
    pub decision_date: Option<NaiveDate>,
    #[serde(with = "dates::opt_iso")]
    pub close_date: Option<NaiveDate>,
    pub document_link: String,
}

/// Keys of the embedded product object.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct ProductKeys {
    pub brand_name: String,
    pub eu_number: String,
    pub inn: String,
    pub mah: String,
    pub indication: String,
    pub atc: String,
    pub page_url: String,
    pub status: String,
}

impl Default for ProductKeys {
    fn default() -> Self {
        Self {
            brand_name: "name".into(),
            eu_number: "eu_number".into(),
            inn: "inn".into(),
            mah: "mah".into(),
            indication: "indication".into(),
            atc: "atc".into(),
            page_url: "url".into(),
            status: "status".into(),
        }
    }
}

/// Keys of each embedded procedure object.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct ProcedureKeys {
    pub procedure_id: String,
    pub procedure_type: String,
    pub ema_number: String,
    pub decision_number: String,
    pub decision_date: String,
    pub close_date: String,
    pub document_link: String,
}

impl Default for ProcedureKeys {
    fn default() -> Self {
        Self {
            procedure_id: "id".into(),
            procedure_type: "type".into(),
            ema_number: "ema_number".into(),
            decision_number: "decision_number".into(),
            decision_date: "decision_date".into(),
            close_date: "close_date".into(),
            document_link: "document".into(),
        }
    }
}

/// Names of the script variables holding page data, and the keys inside.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct PageSelectors {
    pub product_var: String,
    pub procedures_var: String,
    pub product: ProductKeys,
    pub procedure: ProcedureKeys,
}

impl Default for PageSelectors {
    fn default() -> Self {
        Self {
            product_var: "dataProduct".into(),
            procedures_var: "dataProcedures".into(),
            product: ProductKeys::default(),
            procedure: ProcedureKeys::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PageError {
    #[error("page {page}: empty document")]
    Empty { page: String },
    #[error("page {page}: no embedded `{var}` data block")]
    Structure { page: String, var: String },
    #[error("page {page}: cannot decode `{var}` at byte {offset}: {message}")]
    Decode {
        page: String,
        var: String,
        offset: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProductPage {
    pub metadata: ProductMetadata,
    /// Sorted by close date; undated procedures last, page order otherwise.
    pub procedures: Vec<ProcedureRecord>,
    pub warnings: Vec<String>,
}

/// Extracts the product and procedure records embedded in a register page.
/// `page` names the page in errors.
pub fn parse_product_page(html: &str, page: &str, selectors: &PageSelectors) -> Result<ProductPage, PageError> {
    if html.trim().is_empty() {
        return Err(PageError::Empty { page: page.into() });
    }
    let mut warnings = Vec::new();
    let product = embedded_value(html, page, &selectors.product_var)?.ok_or_else(|| PageError::Structure {
        page: page.into(),
        var: selectors.product_var.clone(),
    })?;
    let procedures = embedded_value(html, page, &selectors.procedures_var)?.unwrap_or(Value::Array(Vec::new()));

    let keys = &selectors.product;
    let atc_raw = match product.get(&keys.atc) {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) if s.trim().is_empty() => String::new(),
        // JSON text embedded as a string is kept verbatim if it decodes.
        Some(Value::String(s)) if serde_json::from_str::<Value>(s).is_ok() => s.clone(),
        Some(v) => serde_json::to_string(v).expect("value serializes"),
    };
    let metadata = ProductMetadata {
        brand_name: text_field(&product, &keys.brand_name),
        eu_number: text_field(&product, &keys.eu_number),
        inn: text_field(&product, &keys.inn),
        mah: text_field(&product, &keys.mah),
        indication: text_field(&product, &keys.indication),
        atc_raw,
        page_url: text_field(&product, &keys.page_url),
        status: text_field(&product, &keys.status),
    };

    let pk = &selectors.procedure;
    let list = match procedures {
        Value::Array(items) => items,
        other => {
            warnings.push(format!("`{}` is not a list ({})", selectors.procedures_var, kind(&other)));
            Vec::new()
        }
    };
    let mut records = Vec::with_capacity(list.len());
    for item in &list {
        let mut date = |key: &str| {
            let raw = text_field(item, key);
            let parsed = dates::parse_date(&raw);
            if parsed.is_none() && !raw.is_empty() {
                warnings.push(format!("unparseable {key} {raw:?}"));
            }
            parsed
        };
        let decision_date = date(&pk.decision_date);
        let close_date = date(&pk.close_date);
        records.push(ProcedureRecord {
            procedure_id: text_field(item, &pk.procedure_id),
            procedure_type: text_field(item, &pk.procedure_type),
            ema_number: text_field(item, &pk.ema_number),
            decision_number: text_field(item, &pk.decision_number),
            decision_date,
            close_date,
            document_link: text_field(item, &pk.document_link),
        });
    }
    // Stable: equal dates keep page order.
    records.sort_by_key(|r| (r.close_date.is_none(), r.close_date));
    Ok(ProductPage {
        metadata,
        procedures: records,
        warnings,
    })
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn text_field(obj: &Value, key: &str) -> String {
    match obj.get(key) {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.trim().to_string(),
        Some(Value::Number(n)) => n.to_string(),
        Some(Value::Bool(b)) => b.to_string(),
        Some(other) => serde_json::to_string(other).expect("value serializes"),
    }
}

/// Finds `var|let|const <name> = <json>` and decodes the JSON value.
fn embedded_value(html: &str, page: &str, var: &str) -> Result<Option<Value>, PageError> {
    let pattern = format!(r"(?:\bvar|\blet|\bconst|\bwindow\.)\s*{}\s*=\s*", regex::escape(var));
    let re = Regex::new(&pattern).expect("escaped pattern");
    let Some(m) = re.find(html) else {
        return Ok(None);
    };
    let start = m.end();
    let rest = &html[start..];
    let mut stream = serde_json::Deserializer::from_str(rest).into_iter::<Value>();
    match stream.next() {
        Some(Ok(value)) => Ok(Some(value)),
        Some(Err(e)) => Err(PageError::Decode {
            page: page.into(),
            var: var.into(),
            offset: start + byte_offset(rest, e.line(), e.column()),
            message: e.to_string(),
        }),
        None => Err(PageError::Decode {
            page: page.into(),
            var: var.into(),
            offset: start,
            message: "no value after assignment".into(),
        }),
    }
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len();
    }
    text.len()
}

/// Splits procedures into those closed on or before the data lock and the
/// rest. Undated procedures are kept.
pub fn split_at_data_lock(procedures: Vec<ProcedureRecord>, lock: NaiveDate) -> (Vec<ProcedureRecord>, Vec<ProcedureRecord>) {
    procedures
        .into_iter()
        .partition(|p| p.close_date.is_none_or(|d| d <= lock))
}

pub const PROCEDURE_COLUMNS: [&str; 7] = [
    "procedure_id",
    "procedure_type",
    "ema_number",
    "decision_number",
    "decision_date",
    "close_date",
    "document_link",
];

pub fn procedures_to_rows(procs: &[ProcedureRecord]) -> Vec<Vec<String>> {
    procs
        .iter()
        .map(|p| {
            vec![
                p.procedure_id.clone(),
                p.procedure_type.clone(),
                p.ema_number.clone(),
                p.decision_number.clone(),
                dates::iso_opt(p.decision_date),
                dates::iso_opt(p.close_date),
                p.document_link.clone(),
            ]
        })
        .collect()
}

pub fn procedures_from_rows(rows: &[Vec<String>]) -> Vec<ProcedureRecord> {
    rows.iter()
        .map(|row| {
            let cell = |i: usize| row.get(i).cloned().unwrap_or_default();
            ProcedureRecord {
                procedure_id: cell(0),
                procedure_type: cell(1),
                ema_number: cell(2),
                decision_number: cell(3),
                decision_date: dates::parse_date(&cell(4)),
                close_date: dates::parse_date(&cell(5)),
                document_link: cell(6),
            }
        })
        .collect()
}
