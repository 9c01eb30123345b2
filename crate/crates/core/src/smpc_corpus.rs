//! Label documents on disk: text extraction, Section 4.8 location, and the
//! per-product `latest` / `updates` folder layout.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dates;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("document is encrypted")]
    Encrypted,
    #[error("unparseable document: {0}")]
    Unparseable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedText {
    pub text: String,
    pub pages: usize,
    pub warnings: Vec<String>,
}

/// Concatenates page text in reading order, one newline between pages.
/// Image-only documents give empty text and a warning; there is no OCR.
pub fn extract_text(pdf: &[u8]) -> Result<ExtractedText, ExtractionError> {
    let doc = lopdf::Document::load_mem(pdf).map_err(|e| ExtractionError::Unparseable(e.to_string()))?;
    if doc.is_encrypted() || doc.trailer.get(b"Encrypt").is_ok() {
        return Err(ExtractionError::Encrypted);
    }
    let page_numbers: Vec<u32> = doc.get_pages().keys().copied().collect();
    if page_numbers.is_empty() {
        return Err(ExtractionError::Unparseable("document has no pages".into()));
    }
    let mut warnings = Vec::new();
    let mut pages = Vec::with_capacity(page_numbers.len());
    for n in &page_numbers {
        match doc.extract_text(&[*n]) {
            Ok(t) => pages.push(t.trim_matches(|c| c == '\n' || c == '\r').to_string()),
            Err(e) => {
                warnings.push(format!("page {n}: {e}"));
                pages.push(String::new());
            }
        }
    }
    let text = pages.join("\n");
    if text.trim().is_empty() {
        warnings.push("no extractable text (image-only document?)".into());
    }
    Ok(ExtractedText {
        text,
        pages: page_numbers.len(),
        warnings,
    })
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no Section 4.8 heading found")]
pub struct SectionNotFound;

/// Byte offsets into the full text; `text[start..end]` is the section body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSpan {
    pub start: usize,
    pub end: usize,
}

/// "4.8 Undesirable", "4.8. Undesirable" and "4.8\nUndesirable".
static NUMBERED_HEADING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"4\.8\.?[ \t]*(?:\r?\n[ \t]*)?(?i:undesirable)").expect("static pattern"));
/// Bare "Undesirable effects" starting a line.
static BARE_HEADING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^[ \t]*(?i:undesirable)[ \t]+(?i:effects)").expect("static pattern"));
static NEXT_SUBSECTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^[ \t]*4\.9(?:\.|[ \t]|\r?$)").expect("static pattern"));
static NEXT_SECTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^[ \t]*5\.(?:[ \t]|\r?$)").expect("static pattern"));

/// Finds the Section 4.8 body: from the end of the heading line to the next
/// "4.9" heading, else the next "5." heading, else the end of the text.
/// Surrounding whitespace is excluded from the span.
pub fn locate_section_4_8(text: &str) -> Result<SectionSpan, SectionNotFound> {
    let heading = NUMBERED_HEADING
        .find(text)
        .or_else(|| BARE_HEADING.find(text))
        .ok_or(SectionNotFound)?;
    let body_start = text[heading.end()..]
        .find('\n')
        .map_or(text.len(), |i| heading.end() + i + 1);
    let rest = &text[body_start..];
    let body_end = NEXT_SUBSECTION
        .find(rest)
        .or_else(|| NEXT_SECTION.find(rest))
        .map_or(text.len(), |m| body_start + m.start());
    let body = &text[body_start..body_end];
    let start = body_start + (body.len() - body.trim_start().len());
    let end = (body_start + body.trim_end().len()).max(start);
    Ok(SectionSpan { start, end })
}

pub fn section_text(text: &str) -> Result<&str, SectionNotFound> {
    locate_section_4_8(text).map(|s| &text[s.start..s.end])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmpcVersion {
    pub product_id: String,
    pub version_date: NaiveDate,
    pub source_file: String,
    pub full_text: String,
    pub section_4_8: String,
    pub is_initial: bool,
}

/// Sorts by date, drops same-date duplicates (first kept) and marks the
/// earliest as initial. Returns the dropped duplicates.
pub fn order_versions(mut versions: Vec<SmpcVersion>) -> (Vec<SmpcVersion>, Vec<SmpcVersion>) {
    versions.sort_by_key(|v| v.version_date);
    let mut kept: Vec<SmpcVersion> = Vec::with_capacity(versions.len());
    let mut dropped = Vec::new();
    for mut v in versions {
        if kept.last().is_some_and(|k| k.version_date == v.version_date) {
            dropped.push(v);
            continue;
        }
        v.is_initial = kept.is_empty();
        kept.push(v);
    }
    (kept, dropped)
}

pub const LATEST_DIR: &str = "latest";
pub const UPDATES_DIR: &str = "updates";
const SECTION_SUFFIX: &str = "_section_4_8.txt";
const AES_SUFFIX: &str = "_aes.csv";

/// Corpus root with one folder per product, named after its authorisation
/// number (`EU/1/12/793` → `EU-1-12-793`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLayout {
    pub root: PathBuf,
}

impl CorpusLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn product_dir(&self, product_id: &str) -> PathBuf {
        self.root.join(product_slug(product_id))
    }

    pub fn latest_dir(&self, product_id: &str) -> PathBuf {
        self.product_dir(product_id).join(LATEST_DIR)
    }

    pub fn updates_dir(&self, product_id: &str) -> PathBuf {
        self.product_dir(product_id).join(UPDATES_DIR)
    }
}

pub fn product_slug(product_id: &str) -> String {
    product_id
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path} already exists with different content")]
    Conflict { path: PathBuf },
    #[error("storing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredPaths {
    pub section_text: PathBuf,
    /// Slot for the parsed-AE file; written by the extraction stage.
    pub ae_file: PathBuf,
    pub document: Option<PathBuf>,
    /// False when everything was already on disk with identical content.
    pub written: bool,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the Section 4.8 text for a version into `latest` or `updates` and
/// reserves its parsed-AE file name. `run_stamp` only applies to new files:
/// a version already on disk keeps its original names. The label document
/// itself is kept only in `latest`.
pub fn store_version(
    layout: &CorpusLayout,
    version: &SmpcVersion,
    is_latest: bool,
    document: Option<&[u8]>,
    run_stamp: &str,
) -> Result<StoredPaths, StorageError> {
    let dir = if is_latest {
        layout.latest_dir(&version.product_id)
    } else {
        layout.updates_dir(&version.product_id)
    };
    let prefix = format!("{}_{}_", product_slug(&version.product_id), dates::iso(version.version_date));
    let existing = find_section_file(&dir, &prefix).map_err(io_err(&dir))?;
    let mut written = false;
    let section_path = match existing {
        Some(path) => {
            let on_disk = fs::read(&path).map_err(io_err(&path))?;
            if on_disk != version.section_4_8.as_bytes() {
                return Err(StorageError::Conflict { path });
            }
            path
        }
        None => {
            let path = dir.join(format!("{prefix}{run_stamp}{SECTION_SUFFIX}"));
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            crate::fsutil::write_atomic(&path, version.section_4_8.as_bytes()).map_err(io_err(&path))?;
            written = true;
            path
        }
    };
    let ae_file = ae_path_for(&section_path);

    let document_path = match (is_latest, document) {
        (true, Some(bytes)) => {
            let path = dir.join(&version.source_file);
            match fs::read(&path) {
                Ok(on_disk) if on_disk == bytes => {}
                Ok(_) => return Err(StorageError::Conflict { path }),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    crate::fsutil::write_atomic(&path, bytes).map_err(io_err(&path))?;
                    written = true;
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
            Some(path)
        }
        _ => None,
    };
    Ok(StoredPaths {
        section_text: section_path,
        ae_file,
        document: document_path,
        written,
    })
}

pub fn ae_path_for(section_path: &Path) -> PathBuf {
    let name = section_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.strip_suffix(SECTION_SUFFIX).unwrap_or(&name);
    section_path.with_file_name(format!("{stem}{AES_SUFFIX}"))
}

fn find_section_file(dir: &Path, prefix: &str) -> io::Result<Option<PathBuf>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut hits: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(SECTION_SUFFIX))
        })
        .collect();
    hits.sort();
    Ok(hits.into_iter().next())
}

/// Moves section and AE files of versions other than `latest_date` out of
/// `latest` into `updates`, and removes superseded label documents except
/// `keep_document`. Returns the number of files touched.
pub fn demote_stale_latest(
    layout: &CorpusLayout,
    product_id: &str,
    latest_date: NaiveDate,
    keep_document: &str,
) -> Result<usize, StorageError> {
    let latest = layout.latest_dir(product_id);
    let entries = match fs::read_dir(&latest) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(io_err(&latest)(e)),
    };
    let current = format!("{}_{}_", product_slug(product_id), dates::iso(latest_date));
    let updates = layout.updates_dir(product_id);
    let mut touched = 0;
    let mut paths: Vec<PathBuf> = entries.filter_map(Result::ok).map(|e| e.path()).collect();
    paths.sort();
    for path in paths {
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
            continue;
        };
        let versioned = name.ends_with(SECTION_SUFFIX) || name.ends_with(AES_SUFFIX);
        if versioned && !name.starts_with(&current) {
            fs::create_dir_all(&updates).map_err(io_err(&updates))?;
            let target = updates.join(&name);
            fs::rename(&path, &target).map_err(io_err(&target))?;
            touched += 1;
        } else if !versioned && name.to_ascii_lowercase().ends_with(".pdf") && name != keep_document {
            fs::remove_file(&path).map_err(io_err(&path))?;
            touched += 1;
        }
    }
    Ok(touched)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
    Warning,
}

/// One line of the machine-readable extraction log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionLogRecord {
    pub product: String,
    pub file: String,
    pub outcome: Outcome,
    pub message: String,
}

pub fn extraction_log_bytes(records: &[ExtractionLogRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}
