//! Stage orchestration over a corpus directory.
//!
//! Every stage reads the files written by earlier stages and writes its own,
//! so any stage can be rerun alone. Outputs are written only when their bytes
//! change; rerunning a stage on unchanged inputs leaves the corpus untouched
//! (apart from the append-only logs under `logs/`).
//!
//! Corpus layout:
//!
//! ```text
//! run_manifest.json                 run stamp used in file names
//! register/products.csv             index
//! <slug>/metadata.json              scrape
//! <slug>/procedures.csv             scrape
//! <slug>/versions.json              fetch (documents go to the cache)
//! <slug>/latest/, <slug>/updates/   sections, extract
//! <slug>/sections.json              sections
//! extraction/raw_terms.csv          extract
//! mapping/mapping_table.csv         map
//! timeline/timeline.csv             timeline
//! timeline/durations.csv            timeline
//! dataset/refset_dataset_<stamp>.*  assemble
//! validation/                       validate
//! analytics/                        analyze
//! provenance/<stage>.json           every stage
//! logs/<stage>.jsonl                every stage
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ae_extractor::{self, CleaningRules, RawAeTerm, VersionRef, AE_FILE_COLUMNS};
use crate::analytics::{self, AnalyticsConfig};
use crate::dataset::{self, ActiveFilter, AtcReference, DatasetMode, ExportFormat, ProductRecord};
use crate::dates::{iso, parse_date};
use crate::fsutil::{csv_bytes, read_csv, sha256_hex, write_if_changed};
use crate::gateway::{CachingGateway, GatewayConfig, HttpGateway, ReplayCache, StubGateway, TextGateway};
use crate::meddra::{self, AxialityPolicy, Hierarchy, MappedTerm, MatchMethod, MAPPING_COLUMNS};
use crate::register_index::{self, IndexColumns, RawTable, RegisterProduct, ReportColumns, PRODUCT_COLUMNS};
use crate::register_scraper::{
    self, FetchPolicy, Fetcher, LiveTransport, PageSelectors, ProductMetadata, RecordingTransport, ReplayTransport, Transport,
    PROCEDURE_COLUMNS,
};
use crate::smpc_corpus::{self, product_slug, CorpusLayout, ExtractionLogRecord, Outcome, SmpcVersion};
use crate::time_indexer::{self, PracDates, ProductDates, VersionAes};
use crate::validation::{self, Category, GoldList};

/// A product with its stored sections and, once extracted, their terms.
type ProductSections = (RegisterProduct, Vec<(SectionEntry, Option<Vec<RawAeTerm>>)>);
type ProceduresByProduct = BTreeMap<String, Vec<register_scraper::ProcedureRecord>>;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const ENV_PREFIX: &str = "REFSET_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Index,
    Scrape,
    Fetch,
    Sections,
    Extract,
    Map,
    Timeline,
    Assemble,
    Validate,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Self::Index,
        Self::Scrape,
        Self::Fetch,
        Self::Sections,
        Self::Extract,
        Self::Map,
        Self::Timeline,
        Self::Assemble,
        Self::Validate,
        Self::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Index => "index",
            Self::Scrape => "scrape",
            Self::Fetch => "fetch",
            Self::Sections => "sections",
            Self::Extract => "extract",
            Self::Map => "map",
            Self::Timeline => "timeline",
            Self::Assemble => "assemble",
            Self::Validate => "validate",
            Self::Analyze => "analyze",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s.trim().to_lowercase())
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    pub brand_index: Option<PathBuf>,
    pub ema_report: Option<PathBuf>,
    pub atc_reference: Option<PathBuf>,
    /// One INN per line.
    pub biologics: Option<PathBuf>,
    pub prac_dates: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub overrides: Option<PathBuf>,
    pub cleaning_rules: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Live,
    Replay,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportConfig {
    pub kind: TransportKind,
    /// Recorded responses, for `replay`.
    pub replay_dir: Option<PathBuf>,
    /// Where to record live responses, if anywhere.
    pub record_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Stub,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub stub_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerminologyConfig {
    pub dir: PathBuf,
    pub policy: AxialityPolicy,
    /// Used when the distribution has no release file.
    pub version: String,
}

impl Default for TerminologyConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("meddra"),
            policy: AxialityPolicy::LastLoaded,
            version: "v28".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub formats: Vec<ExportFormat>,
    pub filter: ActiveFilter,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            formats: vec![ExportFormat::Csv, ExportFormat::Xlsx],
            filter: ActiveFilter::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus_root: PathBuf,
    pub data_lock_date: NaiveDate,
    /// Fixed stamp for new file names; otherwise the corpus keeps the one
    /// chosen on its first run.
    pub run_stamp: Option<String>,
    /// Worker threads; 0 lets the runtime decide.
    pub parallelism: usize,
    /// Keep active products only in the assembled dataset.
    pub processed: bool,
    /// Downloaded documents and gateway replies. Defaults to
    /// `<corpus_root>/.cache`.
    pub cache_dir: Option<PathBuf>,
    pub inputs: Inputs,
    pub index: IndexColumns,
    pub report: ReportColumns,
    pub fetch: FetchPolicy,
    pub transport: TransportConfig,
    pub selectors: PageSelectors,
    pub gateway: GatewayConfig,
    pub backend: BackendConfig,
    pub terminology: TerminologyConfig,
    pub dataset: DatasetConfig,
    pub analytics: AnalyticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_root: PathBuf::from("corpus"),
            data_lock_date: time_indexer::default_data_lock(),
            run_stamp: None,
            parallelism: 0,
            processed: true,
            cache_dir: None,
            inputs: Inputs::default(),
            index: IndexColumns::default(),
            report: ReportColumns::default(),
            fetch: FetchPolicy::default(),
            transport: TransportConfig::default(),
            selectors: PageSelectors::default(),
            gateway: GatewayConfig::default(),
            backend: BackendConfig::default(),
            terminology: TerminologyConfig::default(),
            dataset: DatasetConfig::default(),
            analytics: AnalyticsConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

impl RunConfig {
    /// Reads a TOML config, applies `REFSET_*` environment overrides and
    /// resolves relative paths against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Overrides from variables named `REFSET_<FIELD>`, read through `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), PipelineError> {
        let var = |name: &str| get(&format!("{ENV_PREFIX}{name}")).filter(|v| !v.trim().is_empty());
        let bad = |name: &str, v: &str| PipelineError::Config(format!("{ENV_PREFIX}{name}={v:?} is not valid"));
        if let Some(v) = var("CORPUS_ROOT") {
            self.corpus_root = v.into();
        }
        if let Some(v) = var("DATA_LOCK_DATE") {
            self.data_lock_date = parse_date(&v).ok_or_else(|| bad("DATA_LOCK_DATE", &v))?;
        }
        if let Some(v) = var("RUN_STAMP") {
            self.run_stamp = Some(v);
        }
        if let Some(v) = var("PARALLELISM") {
            self.parallelism = v.trim().parse().map_err(|_| bad("PARALLELISM", &v))?;
        }
        if let Some(v) = var("PROCESSED") {
            self.processed = match v.trim().to_lowercase().as_str() {
                "1" | "true" | "yes" => true,
                "0" | "false" | "no" => false,
                _ => return Err(bad("PROCESSED", &v)),
            };
        }
        if let Some(v) = var("CACHE_DIR") {
            self.cache_dir = Some(v.into());
        }
        if let Some(v) = var("TERMINOLOGY_DIR") {
            self.terminology.dir = v.into();
        }
        if let Some(v) = var("AXIALITY_POLICY") {
            self.terminology.policy = match v.trim().to_lowercase().as_str() {
                "lastloaded" | "last_loaded" => AxialityPolicy::LastLoaded,
                "primaryflag" | "primary_flag" => AxialityPolicy::PrimaryFlag,
                _ => return Err(bad("AXIALITY_POLICY", &v)),
            };
        }
        if let Some(v) = var("GATEWAY_BACKEND") {
            self.backend.kind = match v.trim().to_lowercase().as_str() {
                "http" => BackendKind::Http,
                "stub" => BackendKind::Stub,
                _ => return Err(bad("GATEWAY_BACKEND", &v)),
            };
        }
        if let Some(v) = var("GATEWAY_STUB_FILE") {
            self.backend.stub_file = Some(v.into());
        }
        if let Some(v) = var("GATEWAY_MODEL") {
            self.gateway.model_id = v;
        }
        if let Some(v) = var("GATEWAY_ENDPOINT") {
            self.gateway.endpoint = v;
        }
        if let Some(v) = var("TRANSPORT") {
            self.transport.kind = match v.trim().to_lowercase().as_str() {
                "live" => TransportKind::Live,
                "replay" => TransportKind::Replay,
                _ => return Err(bad("TRANSPORT", &v)),
            };
        }
        if let Some(v) = var("REPLAY_DIR") {
            self.transport.replay_dir = Some(v.into());
        }
        if let Some(v) = var("RATE_LIMIT") {
            self.fetch.rate_limit = v.trim().parse().map_err(|_| bad("RATE_LIMIT", &v))?;
        }
        Ok(())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.corpus_root);
        resolve_opt(base, &mut self.cache_dir);
        let i = &mut self.inputs;
        for p in [
            &mut i.brand_index,
            &mut i.ema_report,
            &mut i.atc_reference,
            &mut i.biologics,
            &mut i.prac_dates,
            &mut i.gold,
            &mut i.overrides,
            &mut i.cleaning_rules,
        ] {
            resolve_opt(base, p);
        }
        resolve_opt(base, &mut self.transport.replay_dir);
        resolve_opt(base, &mut self.transport.record_dir);
        resolve_opt(base, &mut self.backend.stub_file);
        resolve(base, &mut self.terminology.dir);
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| PipelineError::Config(m);
        self.fetch.validate().map_err(cfg)?;
        self.gateway.validate_for_pipeline().map_err(cfg)?;
        if let Some(stamp) = &self.run_stamp {
            validate_stamp(stamp)?;
        }
        if self.transport.kind == TransportKind::Replay && self.transport.replay_dir.is_none() {
            return Err(cfg("transport.kind = \"replay\" needs transport.replay_dir".into()));
        }
        if self.backend.kind == BackendKind::Stub && self.backend.stub_file.is_none() {
            return Err(cfg("backend.kind = \"stub\" needs backend.stub_file".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn cache_root(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.corpus_root.join(".cache"))
    }
}

fn validate_stamp(stamp: &str) -> Result<(), PipelineError> {
    if stamp.is_empty() || !stamp.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(PipelineError::Config(format!("run stamp {stamp:?} must be non-empty [A-Za-z0-9_-]")));
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{stage} needs {missing}; run `{run_first}` first")]
    Prerequisite { stage: Stage, missing: String, run_first: Stage },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Index(#[from] register_index::IndexError),
    #[error(transparent)]
    Dictionary(#[from] meddra::LoadError),
    #[error(transparent)]
    Export(#[from] dataset::ExportError),
    #[error(transparent)]
    Override(#[from] validation::OverrideError),
    #[error("gateway: {0}")]
    Gateway(#[from] crate::gateway::GatewayError),
}

impl PipelineError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn parse(path: &Path, message: impl fmt::Display) -> Self {
        Self::Parse {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Option<Stage>,
    pub successes: usize,
    pub failures: usize,
    pub warnings: usize,
    pub duration_ms: u128,
    pub outputs: usize,
    pub messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub config_hash: String,
    pub run_stamp: String,
    pub stages: Vec<StageReport>,
    pub fatal: Option<String>,
}

impl RunReport {
    pub const EXIT_OK: i32 = 0;
    pub const EXIT_FATAL: i32 = 1;
    pub const EXIT_WARNINGS: i32 = 2;

    pub fn exit_code(&self) -> i32 {
        if self.fatal.is_some() {
            Self::EXIT_FATAL
        } else if self.stages.iter().any(|s| s.failures > 0 || s.warnings > 0) {
            Self::EXIT_WARNINGS
        } else {
            Self::EXIT_OK
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Provenance {
    stage: Stage,
    tool_version: String,
    config_hash: String,
    run_stamp: String,
    dictionary_version: String,
    axiality_policy: String,
    schema_version: String,
    outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RunManifest {
    run_stamp: String,
}

/// One downloaded (or downloadable) label version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionSource {
    pub procedure_id: String,
    pub version_date: NaiveDate,
    pub url: String,
    pub source_file: String,
    pub sha256: String,
}

/// A stored Section 4.8 text, paths relative to the corpus root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub procedure_id: String,
    pub version_date: NaiveDate,
    pub source_file: String,
    pub section_file: String,
    pub ae_file: String,
    pub is_initial: bool,
    pub is_latest: bool,
}

/// Per-stage accumulator. Products are processed in parallel and each
/// returns one of these; they are merged in product order.
#[derive(Debug, Default)]
struct Tally {
    successes: usize,
    failures: usize,
    messages: Vec<String>,
    log: Vec<ExtractionLogRecord>,
    outputs: Vec<PathBuf>,
}

impl Tally {
    fn ok(&mut self, product: &str, file: &str, message: impl Into<String>) {
        self.successes += 1;
        self.log.push(ExtractionLogRecord {
            product: product.into(),
            file: file.into(),
            outcome: Outcome::Success,
            message: message.into(),
        });
    }

    fn fail(&mut self, product: &str, file: &str, message: impl Into<String>) {
        let message = message.into();
        tracing::error!(product, file, "{message}");
        self.failures += 1;
        self.messages.push(format!("{product}: {message}"));
        self.log.push(ExtractionLogRecord {
            product: product.into(),
            file: file.into(),
            outcome: Outcome::Failure,
            message,
        });
    }

    fn warn(&mut self, product: &str, file: &str, message: impl Into<String>) {
        let message = message.into();
        tracing::warn!(product, file, "{message}");
        self.messages.push(if product.is_empty() {
            message.clone()
        } else {
            format!("{product}: {message}")
        });
        self.log.push(ExtractionLogRecord {
            product: product.into(),
            file: file.into(),
            outcome: Outcome::Warning,
            message,
        });
    }

    fn merge(&mut self, other: Tally) {
        self.successes += other.successes;
        self.failures += other.failures;
        self.messages.extend(other.messages);
        self.log.extend(other.log);
        self.outputs.extend(other.outputs);
    }

    fn warnings(&self) -> usize {
        self.log.iter().filter(|r| r.outcome == Outcome::Warning).count()
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::parse(path, e))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<PathBuf, PipelineError> {
    write_if_changed(path, bytes).map_err(|e| PipelineError::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Reads a CSV written by an earlier stage and checks its header.
fn read_table(path: &Path, expected: &[&str]) -> Result<Vec<Vec<String>>, PipelineError> {
    let (header, rows) = read_csv(path).map_err(|e| PipelineError::parse(path, e))?;
    if header != expected {
        return Err(PipelineError::parse(path, format!("unexpected header {header:?}")));
    }
    Ok(rows)
}

/// Reads a user-supplied CSV with a header row, which is skipped.
fn read_input_rows(path: &Path) -> Result<Vec<Vec<String>>, PipelineError> {
    read_csv(path).map(|(_, rows)| rows).map_err(|e| PipelineError::parse(path, e))
}

fn file_name_from_url(url: &str) -> String {
    let path = url.split(['?', '#']).next().unwrap_or("");
    let name = path.rsplit('/').next().unwrap_or("");
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn term_key(s: &str) -> String {
    s.trim().to_lowercase()
}

pub struct Pipeline {
    cfg: RunConfig,
    layout: CorpusLayout,
    run_stamp: String,
    config_hash: String,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let root = cfg.corpus_root.clone();
        fs::create_dir_all(&root).map_err(|e| PipelineError::io(&root, e))?;
        let manifest_path = root.join(RUN_MANIFEST);
        let stamp = match (&cfg.run_stamp, manifest_path.exists()) {
            (Some(s), _) => s.clone(),
            (None, true) => read_json::<RunManifest>(&manifest_path)?.run_stamp,
            (None, false) => chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string(),
        };
        validate_stamp(&stamp)?;
        if !manifest_path.exists() {
            write(&manifest_path, &json_bytes(&RunManifest { run_stamp: stamp.clone() }))?;
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self {
            config_hash: cfg.hash(),
            layout: CorpusLayout::new(root),
            run_stamp: stamp,
            cfg,
            pool,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn run_stamp(&self) -> &str {
        &self.run_stamp
    }

    pub fn root(&self) -> &Path {
        &self.layout.root
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.root().join("dataset").join(format!("{}.csv", dataset::dataset_file_stem(&self.run_stamp)))
    }

    /// Runs `stages` in order, stopping at the first fatal error.
    pub fn run(&self, stages: &[Stage]) -> RunReport {
        let mut report = RunReport {
            tool_version: TOOL_VERSION.into(),
            config_hash: self.config_hash.clone(),
            run_stamp: self.run_stamp.clone(),
            stages: Vec::new(),
            fatal: None,
        };
        for &stage in stages {
            match self.run_stage(stage) {
                Ok(r) => report.stages.push(r),
                Err(e) => {
                    tracing::error!(%stage, "stage failed: {e}");
                    report.fatal = Some(format!("{stage}: {e}"));
                    break;
                }
            }
        }
        let path = self.root().join("logs").join("run_report.json");
        if let Err(e) = write(&path, &json_bytes(&report)) {
            tracing::warn!("cannot write run report: {e}");
        }
        report
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageReport, PipelineError> {
        tracing::info!(%stage, "stage start");
        let start = Instant::now();
        let tally = match stage {
            Stage::Index => self.index(),
            Stage::Scrape => self.scrape(),
            Stage::Fetch => self.fetch(),
            Stage::Sections => self.sections(),
            Stage::Extract => self.extract(),
            Stage::Map => self.map(),
            Stage::Timeline => self.timeline(),
            Stage::Assemble => self.assemble(),
            Stage::Validate => self.validate(),
            Stage::Analyze => self.analyze(),
        }?;
        self.append_log(stage, &tally.log)?;
        self.write_provenance(stage, &tally.outputs)?;
        let report = StageReport {
            stage: Some(stage),
            successes: tally.successes,
            failures: tally.failures,
            warnings: tally.warnings(),
            duration_ms: start.elapsed().as_millis(),
            outputs: tally.outputs.len(),
            messages: tally.messages,
        };
        tracing::info!(%stage, successes = report.successes, failures = report.failures, warnings = report.warnings, "stage done");
        Ok(report)
    }

    fn append_log(&self, stage: Stage, records: &[ExtractionLogRecord]) -> Result<(), PipelineError> {
        let dir = self.root().join("logs");
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let path = dir.join(format!("{stage}.jsonl"));
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| PipelineError::io(&path, e))?;
        f.write_all(&smpc_corpus::extraction_log_bytes(records))
            .map_err(|e| PipelineError::io(&path, e))
    }

    /// Release named by the terminology directory, else the configured one.
    pub fn dictionary_version(&self) -> String {
        fs::read_to_string(self.cfg.terminology.dir.join("meddra_release.asc"))
            .ok()
            .as_deref()
            .and_then(meddra::release_version)
            .unwrap_or_else(|| self.cfg.terminology.version.clone())
    }

    fn write_provenance(&self, stage: Stage, outputs: &[PathBuf]) -> Result<(), PipelineError> {
        let mut outs: Vec<String> = outputs.iter().map(|p| relative(self.root(), p)).collect();
        outs.sort();
        outs.dedup();
        let p = Provenance {
            stage,
            tool_version: TOOL_VERSION.into(),
            config_hash: self.config_hash.clone(),
            run_stamp: self.run_stamp.clone(),
            dictionary_version: self.dictionary_version(),
            axiality_policy: self.cfg.terminology.policy.to_string(),
            schema_version: dataset::SCHEMA_VERSION.into(),
            outputs: outs,
        };
        write(&self.root().join("provenance").join(format!("{stage}.json")), &json_bytes(&p))?;
        Ok(())
    }

    fn products_path(&self) -> PathBuf {
        self.root().join("register").join("products.csv")
    }

    fn products(&self, stage: Stage) -> Result<Vec<RegisterProduct>, PipelineError> {
        let path = self.products_path();
        if !path.exists() {
            return Err(PipelineError::Prerequisite {
                stage,
                missing: relative(self.root(), &path),
                run_first: Stage::Index,
            });
        }
        let rows = read_table(&path, &PRODUCT_COLUMNS)?;
        Ok(register_index::products_from_rows(&rows)?)
    }

    /// Per-product work for products whose `file` exists; errors if none has it.
    fn with_product_file<F>(&self, stage: Stage, file: &str, run_first: Stage, f: F) -> Result<Tally, PipelineError>
    where
        F: Fn(&RegisterProduct, &Path) -> Result<Tally, PipelineError> + Sync,
    {
        let products = self.products(stage)?;
        let present: Vec<(&RegisterProduct, PathBuf)> = products
            .iter()
            .map(|p| (p, self.layout.product_dir(&p.entry.eu_number).join(file)))
            .filter(|(_, path)| path.exists())
            .collect();
        if present.is_empty() && !products.is_empty() {
            return Err(PipelineError::Prerequisite {
                stage,
                missing: format!("<product>/{file}"),
                run_first,
            });
        }
        let mut tally = Tally::default();
        for p in &products {
            if !present.iter().any(|(q, _)| q.entry.eu_number == p.entry.eu_number) {
                tally.warn(&p.entry.eu_number, file, format!("no {file}; product skipped"));
            }
        }
        let results: Vec<Result<Tally, PipelineError>> = self.pool.install(|| present.par_iter().map(|(p, path)| f(p, path)).collect());
        for r in results {
            tally.merge(r?);
        }
        Ok(tally)
    }

    fn transport(&self) -> Result<Arc<dyn Transport>, PipelineError> {
        let t = &self.cfg.transport;
        Ok(match t.kind {
            TransportKind::Replay => {
                let dir = t.replay_dir.as_ref().expect("validated");
                Arc::new(ReplayTransport::open(dir).map_err(|e| PipelineError::io(dir, e))?)
            }
            TransportKind::Live => {
                let live = LiveTransport::new().map_err(|e| PipelineError::Config(e.to_string()))?;
                match &t.record_dir {
                    Some(dir) => Arc::new(RecordingTransport::new(live, dir).map_err(|e| PipelineError::io(dir, e))?),
                    None => Arc::new(live),
                }
            }
        })
    }

    fn gateway(&self) -> Result<CachingGateway<Box<dyn TextGateway>>, PipelineError> {
        let inner: Box<dyn TextGateway> = match self.cfg.backend.kind {
            BackendKind::Stub => {
                let path = self.cfg.backend.stub_file.as_ref().expect("validated");
                Box::new(StubGateway::load(path).map_err(|e| PipelineError::io(path, e))?)
            }
            BackendKind::Http => Box::new(HttpGateway::new()?),
        };
        Ok(CachingGateway::new(inner, ReplayCache::new(self.cfg.cache_root().join("gateway"))))
    }

    fn cleaning_rules(&self) -> Result<CleaningRules, PipelineError> {
        match &self.cfg.inputs.cleaning_rules {
            Some(path) => CleaningRules::load(path).map_err(|e| PipelineError::parse(path, e)),
            None => Ok(CleaningRules::default()),
        }
    }

    fn document_cache(&self, product_id: &str) -> PathBuf {
        self.cfg.cache_root().join("documents").join(product_slug(product_id))
    }

    // ---- stages -------------------------------------------------------

    fn index(&self) -> Result<Tally, PipelineError> {
        let mut t = Tally::default();
        let path = self
            .cfg
            .inputs
            .brand_index
            .as_ref()
            .ok_or_else(|| PipelineError::Config("inputs.brand_index is not set".into()))?;
        let index = register_index::parse_brand_index(&RawTable::load(path)?, &self.cfg.index)?;
        for r in &index.rejected {
            t.warn("", &path.display().to_string(), format!("row {} rejected: {}", r.row, r.reason));
        }
        let report = match &self.cfg.inputs.ema_report {
            Some(p) => register_index::parse_ema_report(&RawTable::load(p)?, &self.cfg.report)?,
            None => Vec::new(),
        };
        let joined = register_index::join_with_ema_report(&index.entries, &report);
        if self.cfg.inputs.ema_report.is_some() {
            for b in &joined.unmatched {
                t.warn(b, "", "no medicines report row");
            }
            for k in &joined.duplicate_keys {
                t.warn(k, "", "duplicate medicines report row; first used");
            }
        }
        for p in &joined.products {
            t.ok(&p.entry.eu_number, &p.entry.register_url, "indexed");
        }
        let out = self.products_path();
        t.outputs.push(write(&out, &csv_bytes(&PRODUCT_COLUMNS, &register_index::products_to_rows(&joined.products)))?);
        Ok(t)
    }

    fn scrape(&self) -> Result<Tally, PipelineError> {
        let products = self.products(Stage::Scrape)?;
        let fetcher = Fetcher::new(self.transport()?, self.cfg.fetch.clone());
        let lock = self.cfg.data_lock_date;
        let results: Vec<Result<Tally, PipelineError>> = self.pool.install(|| {
            products
                .par_iter()
                .map(|p| {
                    let mut t = Tally::default();
                    let pid = &p.entry.eu_number;
                    let url = &p.entry.register_url;
                    let html = match fetcher.fetch_page(url) {
                        Ok(h) => h,
                        Err(e) => {
                            t.fail(pid, url, e.to_string());
                            return Ok(t);
                        }
                    };
                    let page = match register_scraper::parse_product_page(&html, url, &self.cfg.selectors) {
                        Ok(pg) => pg,
                        Err(e) => {
                            t.fail(pid, url, e.to_string());
                            return Ok(t);
                        }
                    };
                    for w in &page.warnings {
                        t.warn(pid, url, w.clone());
                    }
                    let (kept, excluded) = register_scraper::split_at_data_lock(page.procedures, lock);
                    for e in &excluded {
                        t.warn(pid, url, format!("procedure {} closed after the data lock; excluded", e.procedure_id));
                    }
                    let dir = self.layout.product_dir(pid);
                    t.outputs.push(write(&dir.join("metadata.json"), &json_bytes(&page.metadata))?);
                    t.outputs.push(write(
                        &dir.join("procedures.csv"),
                        &csv_bytes(&PROCEDURE_COLUMNS, &register_scraper::procedures_to_rows(&kept)),
                    )?);
                    t.ok(pid, url, format!("{} procedures", kept.len()));
                    Ok(t)
                })
                .collect()
        });
        let mut tally = Tally::default();
        for r in results {
            tally.merge(r?);
        }
        self.log_http(&fetcher)?;
        Ok(tally)
    }

    fn log_http(&self, fetcher: &Fetcher) -> Result<(), PipelineError> {
        let dir = self.root().join("logs");
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let path = dir.join("http.jsonl");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| PipelineError::io(&path, e))?;
        for r in fetcher.take_log() {
            let mut line = serde_json::to_vec(&r).expect("record serializes");
            line.push(b'\n');
            f.write_all(&line).map_err(|e| PipelineError::io(&path, e))?;
        }
        Ok(())
    }

    fn fetch(&self) -> Result<Tally, PipelineError> {
        let transport = self.transport()?;
        let fetcher = Fetcher::new(transport, self.cfg.fetch.clone());
        let tally = self.with_product_file(Stage::Fetch, "procedures.csv", Stage::Scrape, |p, path| {
            let mut t = Tally::default();
            let pid = &p.entry.eu_number;
            let rows = read_table(path, &PROCEDURE_COLUMNS)?;
            let procs = register_scraper::procedures_from_rows(&rows);
            let cache = self.document_cache(pid);
            let mut versions: Vec<VersionSource> = Vec::new();
            let mut names = BTreeSet::new();
            for proc in procs.iter().filter(|p| !p.document_link.trim().is_empty()) {
                let Some(date) = proc.close_date else {
                    t.warn(pid, &proc.document_link, format!("procedure {} has no close date; document skipped", proc.procedure_id));
                    continue;
                };
                let mut name = file_name_from_url(&proc.document_link);
                if name.is_empty() {
                    name = format!("{}.pdf", file_name_from_url(&proc.procedure_id));
                }
                if !names.insert(name.clone()) {
                    name = format!("{}_{name}", iso(date));
                    names.insert(name.clone());
                }
                let target = cache.join(&name);
                let bytes = match fs::read(&target) {
                    Ok(b) => b,
                    Err(_) => match fetcher.fetch_document(&proc.document_link) {
                        Ok(b) => {
                            write(&target, &b)?;
                            b
                        }
                        Err(e) => {
                            t.fail(pid, &proc.document_link, e.to_string());
                            continue;
                        }
                    },
                };
                t.ok(pid, &name, "document available");
                versions.push(VersionSource {
                    procedure_id: proc.procedure_id.clone(),
                    version_date: date,
                    url: proc.document_link.clone(),
                    source_file: name,
                    sha256: sha256_hex(&bytes),
                });
            }
            versions.sort_by_key(|v| v.version_date);
            t.outputs.push(write(&self.layout.product_dir(pid).join("versions.json"), &json_bytes(&versions))?);
            Ok(t)
        });
        self.log_http(&fetcher)?;
        tally
    }

    fn sections(&self) -> Result<Tally, PipelineError> {
        self.with_product_file(Stage::Sections, "versions.json", Stage::Fetch, |p, path| {
            let mut t = Tally::default();
            let pid = &p.entry.eu_number;
            let sources: Vec<VersionSource> = read_json(path)?;
            let cache = self.document_cache(pid);
            let mut versions = Vec::new();
            let mut by_file: HashMap<String, (String, Vec<u8>)> = HashMap::new();
            for src in &sources {
                let doc_path = cache.join(&src.source_file);
                let bytes = match fs::read(&doc_path) {
                    Ok(b) => b,
                    Err(e) => {
                        t.fail(pid, &src.source_file, format!("document missing from cache: {e}"));
                        continue;
                    }
                };
                let text = match smpc_corpus::extract_text(&bytes) {
                    Ok(x) => x,
                    Err(e) => {
                        t.fail(pid, &src.source_file, e.to_string());
                        continue;
                    }
                };
                for w in &text.warnings {
                    t.warn(pid, &src.source_file, w.clone());
                }
                let section = match smpc_corpus::section_text(&text.text) {
                    Ok(s) => s.to_string(),
                    Err(e) => {
                        t.fail(pid, &src.source_file, e.to_string());
                        continue;
                    }
                };
                by_file.insert(src.source_file.clone(), (src.procedure_id.clone(), bytes));
                versions.push(SmpcVersion {
                    product_id: pid.clone(),
                    version_date: src.version_date,
                    source_file: src.source_file.clone(),
                    full_text: text.text,
                    section_4_8: section,
                    is_initial: false,
                });
            }
            let (kept, dropped) = smpc_corpus::order_versions(versions);
            for d in &dropped {
                t.warn(pid, &d.source_file, format!("second version dated {}; dropped", iso(d.version_date)));
            }
            let mut entries = Vec::new();
            if let Some(latest) = kept.last() {
                smpc_corpus::demote_stale_latest(&self.layout, pid, latest.version_date, &latest.source_file)
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
            }
            for (i, v) in kept.iter().enumerate() {
                let is_latest = i + 1 == kept.len();
                let (procedure_id, bytes) = &by_file[&v.source_file];
                let stored = match smpc_corpus::store_version(&self.layout, v, is_latest, Some(bytes), &self.run_stamp) {
                    Ok(s) => s,
                    Err(e) => {
                        t.fail(pid, &v.source_file, e.to_string());
                        continue;
                    }
                };
                t.outputs.push(stored.section_text.clone());
                t.outputs.extend(stored.document.clone());
                t.ok(pid, &v.source_file, format!("section 4.8: {} chars", v.section_4_8.len()));
                entries.push(SectionEntry {
                    procedure_id: procedure_id.clone(),
                    version_date: v.version_date,
                    source_file: v.source_file.clone(),
                    section_file: relative(self.root(), &stored.section_text),
                    ae_file: relative(self.root(), &stored.ae_file),
                    is_initial: v.is_initial,
                    is_latest,
                });
            }
            t.outputs.push(write(&self.layout.product_dir(pid).join("sections.json"), &json_bytes(&entries))?);
            Ok(t)
        })
    }

    fn extract(&self) -> Result<Tally, PipelineError> {
        let gateway = self.gateway()?;
        let rules = self.cleaning_rules()?;
        let raw_terms = std::sync::Mutex::new(Vec::<(String, RawAeTerm, usize)>::new());
        let mut tally = self.with_product_file(Stage::Extract, "sections.json", Stage::Sections, |p, path| {
            let mut t = Tally::default();
            let pid = &p.entry.eu_number;
            let entries: Vec<SectionEntry> = read_json(path)?;
            for e in &entries {
                let section_path = self.root().join(&e.section_file);
                let section = fs::read_to_string(&section_path).map_err(|err| PipelineError::io(&section_path, err))?;
                let vref = VersionRef {
                    product_id: pid.clone(),
                    version_date: e.version_date,
                    source_file: e.source_file.clone(),
                };
                match ae_extractor::extract_aes(&section, &vref, &gateway, &self.cfg.gateway) {
                    Ok(raw) => {
                        let cleaned = ae_extractor::clean_terms(&raw, &rules);
                        if cleaned.is_empty() {
                            t.warn(pid, &e.source_file, "no adverse events extracted");
                        }
                        let ae_path = self.root().join(&e.ae_file);
                        t.outputs.push(write(&ae_path, &csv_bytes(&AE_FILE_COLUMNS, &ae_extractor::terms_to_rows(&cleaned)))?);
                        t.ok(pid, &e.source_file, format!("{} raw, {} cleaned terms", raw.len(), cleaned.len()));
                        let mut sink = raw_terms.lock().expect("raw terms poisoned");
                        sink.extend(raw.into_iter().enumerate().map(|(i, r)| (pid.clone(), r, i)));
                    }
                    Err(err) => t.fail(pid, &e.source_file, err.to_string()),
                }
            }
            Ok(t)
        })?;
        for w in gateway.take_warnings() {
            tally.warn("", "", w);
        }
        let mut raw = raw_terms.into_inner().expect("raw terms poisoned");
        raw.sort_by(|a, b| (&a.0, a.1.version_date, a.2).cmp(&(&b.0, b.1.version_date, b.2)));
        let rows: Vec<RawAeTerm> = raw.into_iter().map(|(_, r, _)| r).collect();
        let path = self.root().join("extraction").join("raw_terms.csv");
        tally.outputs.push(write(&path, &csv_bytes(&AE_FILE_COLUMNS, &ae_extractor::terms_to_rows(&rows)))?);
        tracing::info!(live_calls = gateway.live_calls(), "extraction gateway calls");
        Ok(tally)
    }

    /// Section entries of every product, paired with their cleaned terms
    /// where an AE file exists.
    fn extracted_versions(&self, stage: Stage) -> Result<Vec<ProductSections>, PipelineError> {
        let products = self.products(stage)?;
        let mut out = Vec::new();
        for p in products {
            let path = self.layout.product_dir(&p.entry.eu_number).join("sections.json");
            if !path.exists() {
                continue;
            }
            let entries: Vec<SectionEntry> = read_json(&path)?;
            let mut versions = Vec::new();
            for e in entries {
                let ae_path = self.root().join(&e.ae_file);
                let terms = if ae_path.exists() {
                    Some(ae_extractor::terms_from_rows(&read_table(&ae_path, &AE_FILE_COLUMNS)?))
                } else {
                    None
                };
                versions.push((e, terms));
            }
            out.push((p, versions));
        }
        Ok(out)
    }

    fn require(&self, stage: Stage, rel: &str, run_first: Stage) -> Result<PathBuf, PipelineError> {
        let path = self.root().join(rel);
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::Prerequisite {
                stage,
                missing: rel.to_string(),
                run_first,
            })
        }
    }

    fn hierarchy(&self) -> Result<Hierarchy, PipelineError> {
        let mut h = meddra::load_hierarchy(&self.cfg.terminology.dir, self.cfg.terminology.policy)?;
        if h.version == "unknown" {
            h.version = self.cfg.terminology.version.clone();
        }
        Ok(h)
    }

    fn map(&self) -> Result<Tally, PipelineError> {
        self.require(Stage::Map, "extraction/raw_terms.csv", Stage::Extract)?;
        let mut t = Tally::default();
        let h = self.hierarchy()?;
        for w in &h.load_warnings {
            t.warn("", "dictionary", w.clone());
        }
        let mut distinct: BTreeMap<String, String> = BTreeMap::new();
        for (_, versions) in self.extracted_versions(Stage::Map)? {
            for term in versions.iter().filter_map(|(_, terms)| terms.as_ref()).flatten() {
                distinct.entry(term_key(&term.text)).or_insert_with(|| term.text.clone());
            }
        }
        let gateway = self.gateway()?;
        let terms: Vec<&String> = distinct.values().collect();
        let mut mapped: Vec<MappedTerm> = self
            .pool
            .install(|| terms.par_iter().map(|term| meddra::map_term(term, &h, &gateway, &self.cfg.gateway)).collect());
        if let Some(path) = &self.cfg.inputs.overrides {
            let overrides = validation::overrides_from_rows(&read_input_rows(path)?).map_err(|e| PipelineError::parse(path, e))?;
            let unused: Vec<&String> = overrides.keys().filter(|k| !distinct.contains_key(&term_key(k))).collect();
            for k in unused {
                t.warn(k, "overrides", "override term not among extracted terms");
            }
            mapped = validation::apply_manual_overrides(&mapped, &overrides, &h)?;
        }
        for w in gateway.take_warnings() {
            t.warn("", "", w);
        }
        for m in &mapped {
            match m.method {
                MatchMethod::Error => t.fail(&m.raw, "", m.note.clone()),
                MatchMethod::Unmatched => t.warn(&m.raw, "", format!("unmatched: {}", m.note)),
                _ => t.successes += 1,
            }
        }
        let dir = self.root().join("mapping");
        t.outputs.push(write(&dir.join("mapping_table.csv"), &csv_bytes(&MAPPING_COLUMNS, &meddra::mapping_to_rows(&mapped)))?);
        Ok(t)
    }

    fn mapping_table(&self, stage: Stage) -> Result<Vec<MappedTerm>, PipelineError> {
        let path = self.require(stage, "mapping/mapping_table.csv", Stage::Map)?;
        meddra::mapping_from_rows(&read_table(&path, &MAPPING_COLUMNS)?).map_err(|e| PipelineError::parse(&path, e))
    }

    fn timeline(&self) -> Result<Tally, PipelineError> {
        let mapping: HashMap<String, MappedTerm> = self
            .mapping_table(Stage::Timeline)?
            .into_iter()
            .map(|m| (term_key(&m.raw), m))
            .collect();
        let prac: Option<PracDates> = match &self.cfg.inputs.prac_dates {
            Some(path) => {
                let (dates, warnings) = time_indexer::prac_from_rows(&read_input_rows(path)?);
                if !warnings.is_empty() {
                    tracing::warn!(?warnings, "reference date file");
                }
                Some(dates)
            }
            None => None,
        };
        let mut t = Tally::default();
        let mut entries = Vec::new();
        let mut product_dates = Vec::new();
        for (p, versions) in self.extracted_versions(Stage::Timeline)? {
            let pid = &p.entry.eu_number;
            let mut usable: Vec<VersionAes> = versions
                .iter()
                .filter_map(|(e, terms)| {
                    Some(VersionAes {
                        version_date: e.version_date,
                        is_initial: false,
                        source_file: e.source_file.clone(),
                        procedure_id: e.procedure_id.clone(),
                        terms: terms
                            .as_ref()?
                            .iter()
                            .map(|term| match mapping.get(&term_key(&term.text)) {
                                Some(m) => MappedTerm {
                                    raw: term.text.clone(),
                                    ..m.clone()
                                },
                                None => MappedTerm::failed(&term.text, MatchMethod::Error, "term missing from mapping table"),
                            })
                            .collect(),
                    })
                })
                .collect();
            if let Some(first) = usable.first_mut() {
                first.is_initial = true;
            }
            product_dates.push(ProductDates {
                product_id: pid.clone(),
                authorisation_date: p.report.as_ref().and_then(|r| r.approval_date),
                version_dates: versions.iter().map(|(e, _)| e.version_date).collect(),
            });
            match time_indexer::build_timeline(pid, &usable) {
                Ok(mut es) => {
                    t.ok(pid, "", format!("{} entries from {} versions", es.len(), usable.len()));
                    for e in es.iter().filter(|e| e.term.method == MatchMethod::Error && e.term.note == "term missing from mapping table") {
                        t.warn(pid, &e.source_file, format!("{:?} missing from mapping table", e.term.raw));
                    }
                    entries.append(&mut es);
                }
                Err(e) => t.warn(pid, "", e.to_string()),
            }
        }
        for w in time_indexer::attach_reference_dates(&mut entries, prac.as_ref()) {
            t.warn("", "prac_dates", w);
        }
        let (durations, warnings) = time_indexer::first_update_durations(&product_dates, self.cfg.data_lock_date);
        for w in warnings {
            t.warn("", "durations", w);
        }
        let dir = self.root().join("timeline");
        t.outputs.push(write(
            &dir.join("timeline.csv"),
            &csv_bytes(&time_indexer::timeline_columns(), &time_indexer::timeline_to_rows(&entries)),
        )?);
        let rows: Vec<Vec<String>> = durations
            .iter()
            .map(|d| vec![d.product_id.clone(), d.days.to_string(), if d.event { "1" } else { "0" }.to_string()])
            .collect();
        t.outputs.push(write(&dir.join("durations.csv"), &csv_bytes(&DURATION_COLUMNS, &rows))?);
        Ok(t)
    }

    fn product_records(&self, stage: Stage) -> Result<(Vec<ProductRecord>, ProceduresByProduct), PipelineError> {
        let mut records = Vec::new();
        let mut procedures = BTreeMap::new();
        for p in self.products(stage)? {
            let pid = p.entry.eu_number.clone();
            let dir = self.layout.product_dir(&pid);
            let meta_path = dir.join("metadata.json");
            let meta: ProductMetadata = if meta_path.exists() {
                read_json(&meta_path)?
            } else {
                ProductMetadata::default()
            };
            let proc_path = dir.join("procedures.csv");
            if proc_path.exists() {
                procedures.insert(pid.clone(), register_scraper::procedures_from_rows(&read_table(&proc_path, &PROCEDURE_COLUMNS)?));
            }
            let report = p.report.clone().unwrap_or_default();
            let pick = |a: &str, b: &str| if a.trim().is_empty() { b.to_string() } else { a.to_string() };
            records.push(ProductRecord {
                product_id: pid.clone(),
                brand_name: pick(&p.entry.brand_name, &meta.brand_name),
                inn: pick(&meta.inn, &report.inn),
                eu_number: pid,
                mah: pick(&meta.mah, &report.mah),
                indication: meta.indication.clone(),
                atc_raw: meta.atc_raw.clone(),
                atc_code: dataset::first_atc_code(&report.atc_code)
                    .or_else(|| dataset::first_atc_code(&meta.atc_raw))
                    .unwrap_or_default(),
                status: meta.status.clone(),
            });
        }
        Ok((records, procedures))
    }

    fn assemble(&self) -> Result<Tally, PipelineError> {
        let path = self.require(Stage::Assemble, "timeline/timeline.csv", Stage::Timeline)?;
        let timeline = time_indexer::timeline_from_rows(&read_table(&path, &time_indexer::timeline_columns())?)
            .map_err(|e| PipelineError::parse(&path, e))?;
        let (products, procedures) = self.product_records(Stage::Assemble)?;
        let atc = match &self.cfg.inputs.atc_reference {
            Some(p) => AtcReference::from_rows(&read_input_rows(p)?),
            None => AtcReference::default(),
        };
        let mode = if self.cfg.processed {
            DatasetMode::Processed
        } else {
            DatasetMode::Raw
        };
        let assembled = dataset::assemble(&dataset::AssemblyInput {
            products: &products,
            timeline: &timeline,
            procedures: &procedures,
            atc: &atc,
            mode,
            filter: &self.cfg.dataset.filter,
        });
        let mut t = Tally::default();
        for w in &assembled.warnings {
            t.warn("", "", w.clone());
        }
        for s in &assembled.skipped {
            t.fail("", "", s.clone());
        }
        for (pid, n) in &assembled.excluded_inactive {
            t.warn(pid, "", format!("{n} rows excluded: product not active"));
        }
        let known: BTreeSet<&str> = products.iter().map(|p| p.eu_number.as_str()).collect();
        let mut missing_files = BTreeSet::new();
        for r in &assembled.rows {
            if !known.contains(r.eu_number.as_str()) {
                t.fail(&r.eu_number, "", "row references an unknown product");
            }
            if !self.document_cache(&r.eu_number).join(&r.source_file).exists() {
                missing_files.insert((r.eu_number.clone(), r.source_file.clone()));
            }
        }
        for (pid, f) in missing_files {
            t.warn(&pid, &f, "source file not found in the document store");
        }
        t.successes += assembled.rows.len();
        let dir = self.root().join("dataset");
        let exported = dataset::export(&assembled.rows, &dir, &self.run_stamp, &self.cfg.dataset.formats)?;
        for w in exported.warnings {
            t.warn("", "", w);
        }
        t.outputs.extend(exported.paths);
        let report = dataset::report(&assembled, mode);
        t.outputs.push(write(&dir.join("assembly_report.json"), &json_bytes(&report))?);
        Ok(t)
    }

    fn validate(&self) -> Result<Tally, PipelineError> {
        let mapping = self.mapping_table(Stage::Validate)?;
        let raw_path = self.require(Stage::Validate, "extraction/raw_terms.csv", Stage::Extract)?;
        let raw = ae_extractor::terms_from_rows(&read_table(&raw_path, &AE_FILE_COLUMNS)?);
        let rules = self.cleaning_rules()?;
        let mut t = Tally::default();
        let mut extracted: BTreeMap<(String, NaiveDate), Vec<String>> = BTreeMap::new();
        for r in &raw {
            let cleaned = rules.clean(&r.text);
            if !cleaned.is_empty() {
                extracted.entry((r.product_id.clone(), r.version_date)).or_default().push(cleaned);
            }
        }
        let gold: Vec<GoldList> = match &self.cfg.inputs.gold {
            Some(p) => validation::gold_from_rows(&read_input_rows(p)?),
            None => {
                t.warn("", "", "no gold file configured; extraction accuracy not computed");
                Vec::new()
            }
        };
        let mut scored = Vec::new();
        let mut verdict_rows = Vec::new();
        for g in &gold {
            let date = g.version_date.or_else(|| {
                extracted
                    .keys()
                    .filter(|(p, _)| *p == g.product_id)
                    .map(|(_, d)| *d)
                    .max()
            });
            let terms = date.and_then(|d| extracted.get(&(g.product_id.clone(), d))).cloned().unwrap_or_default();
            if terms.is_empty() {
                t.warn(&g.product_id, "", "no extracted terms for gold list");
            }
            let (doc, verdicts) = validation::score_document(&g.product_id, date, &terms, &g.terms);
            for v in &verdicts {
                verdict_rows.push(vec![
                    g.product_id.clone(),
                    date.map(iso).unwrap_or_default(),
                    v.item.clone(),
                    v.category.to_string(),
                ]);
            }
            t.ok(&g.product_id, "", format!("accuracy {:?}", doc.accuracy));
            scored.push((doc, verdicts));
        }
        let report = validation::ValidationReport::new(scored, validation::mapping_breakdown(&mapping), t.messages.clone());
        let dir = self.root().join("validation");
        t.outputs.push(write(&dir.join("validation_report.json"), &json_bytes(&report))?);
        t.outputs.push(write(
            &dir.join("verdicts.csv"),
            &csv_bytes(&["product_id", "version_date", "item", "category"], &verdict_rows),
        )?);
        let counts: Vec<Vec<String>> = Category::ALL
            .iter()
            .map(|c| vec![c.to_string(), report.counts[c].to_string()])
            .collect();
        t.outputs.push(write(&dir.join("counts.csv"), &csv_bytes(&["category", "count"], &counts))?);
        Ok(t)
    }

    fn analyze(&self) -> Result<Tally, PipelineError> {
        let ds_rel = relative(self.root(), &self.dataset_path());
        let ds = self.require(Stage::Analyze, &ds_rel, Stage::Assemble)?;
        let dur = self.require(Stage::Analyze, "timeline/durations.csv", Stage::Timeline)?;
        let rows = dataset::rows_from_table(&read_table(&ds, dataset::COLUMNS)?).map_err(|e| PipelineError::parse(&ds, e))?;
        let durations: Vec<(f64, bool)> = read_table(&dur, &DURATION_COLUMNS)?
            .iter()
            .map(|r| {
                let days: f64 = r[1].parse().map_err(|_| PipelineError::parse(&dur, format!("bad days {:?}", r[1])))?;
                Ok((days, r[2] == "1"))
            })
            .collect::<Result<_, PipelineError>>()?;
        let biologics: BTreeSet<String> = match &self.cfg.inputs.biologics {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| PipelineError::io(p, e))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect(),
            None => BTreeSet::new(),
        };
        let out = analytics::analyze(&rows, &durations, &biologics, &self.cfg.analytics);
        let mut t = Tally::default();
        for w in &out.summary.warnings {
            t.warn("", "", w.clone());
        }
        t.successes = out.tables.len();
        t.outputs
            .extend(analytics::write_outputs(&out, &self.root().join("analytics")).map_err(|e| PipelineError::io(self.root(), e))?);
        Ok(t)
    }
}

pub const DURATION_COLUMNS: [&str; 3] = ["product_id", "days", "event"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn config_defaults_and_env() {
        let mut cfg = RunConfig::from_toml("corpus_root = \"c\"\n[fetch]\nrate_limit = 5.0\n").unwrap();
        assert_eq!(cfg.data_lock_date, NaiveDate::from_ymd_opt(2025, 12, 15).unwrap());
        assert_eq!(cfg.fetch.rate_limit, 5.0);
        assert_eq!(cfg.fetch.max_retries, 3);
        let env: HashMap<&str, &str> = [("REFSET_DATA_LOCK_DATE", "2020-01-31"), ("REFSET_PARALLELISM", "2"), ("REFSET_PROCESSED", "no")].into();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.data_lock_date, NaiveDate::from_ymd_opt(2020, 1, 31).unwrap());
        assert_eq!(cfg.parallelism, 2);
        assert!(!cfg.processed);
        let bad: HashMap<&str, &str> = [("REFSET_PARALLELISM", "many")].into();
        assert!(cfg.apply_env(|k| bad.get(k).map(|v| v.to_string())).is_err());
    }

    #[test]
    fn config_rejects_nonzero_temperature() {
        let cfg = RunConfig::from_toml("[gateway]\ntemperature = 0.7\n").unwrap();
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn config_hash_is_stable() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.parallelism = 3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut cfg = RunConfig::from_toml("corpus_root = \"out\"\n[inputs]\nbrand_index = \"idx.csv\"\n").unwrap();
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.corpus_root, PathBuf::from("/base/out"));
        assert_eq!(cfg.inputs.brand_index, Some(PathBuf::from("/base/idx.csv")));
        assert_eq!(cfg.terminology.dir, PathBuf::from("/base/meddra"));
    }

    #[test]
    fn prerequisites_name_the_earlier_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            corpus_root: dir.path().join("c"),
            run_stamp: Some("T".into()),
            ..RunConfig::default()
        };
        let p = Pipeline::new(cfg).unwrap();
        match p.run_stage(Stage::Scrape) {
            Err(PipelineError::Prerequisite { run_first, .. }) => assert_eq!(run_first, Stage::Index),
            other => panic!("{other:?}"),
        }
        match p.run_stage(Stage::Map) {
            Err(PipelineError::Prerequisite { run_first, .. }) => assert_eq!(run_first, Stage::Extract),
            other => panic!("{other:?}"),
        }
        let report = p.run(&[Stage::Analyze]);
        assert_eq!(report.exit_code(), RunReport::EXIT_FATAL);
    }

    #[test]
    fn run_stamp_persists() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            corpus_root: dir.path().join("c"),
            ..RunConfig::default()
        };
        let first = Pipeline::new(cfg.clone()).unwrap().run_stamp().to_string();
        std::thread::sleep(std::time::Duration::from_millis(1100));
        assert_eq!(Pipeline::new(cfg).unwrap().run_stamp(), first);
    }

    #[test]
    fn file_names_from_urls() {
        assert_eq!(file_name_from_url("https://x/y/anx_1234_en.pdf?x=1"), "anx_1234_en.pdf");
        assert_eq!(file_name_from_url("https://x/y/"), "");
    }
}
