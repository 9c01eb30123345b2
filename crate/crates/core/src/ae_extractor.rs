//! Adverse-event term extraction from Section 4.8 text, and the cleaning
//! rules applied to the gateway's term list.

use std::collections::HashSet;
use std::path::Path;
use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dates;
pub use crate::gateway::GatewayConfig;
use crate::gateway::{render, GatewayError, GatewayRequest, Task, TextGateway};

/// User prompt for extraction. Versioned; its text is part of every cache key.
pub const EXTRACT_PROMPT: &str = include_str!("../assets/prompts/extract_aes.v1.txt");
pub const EXTRACT_PROMPT_VERSION: &str = "extract_aes.v1";

const DEFAULT_RULES: &str = include_str!("../assets/cleaning_rules.v1.json");

/// Longest field accepted as a term; anything longer is prose, not a list.
const MAX_TERM_CHARS: usize = 160;
static QUOTE_AFTER_SPACE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(^|,|\n)[ \t]+""#).expect("static pattern"));
const HEADER_WORDS: &[&str] = &["adverse event", "adverse events", "adverse_event", "ae", "term", "terms", "adverse reaction"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawAeTerm {
    pub text: String,
    pub product_id: String,
    #[serde(with = "chrono_iso")]
    pub version_date: NaiveDate,
    pub source_file: String,
}

mod chrono_iso {
    use chrono::NaiveDate;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &NaiveDate, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::dates::iso(*d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDate, D::Error> {
        let text = String::deserialize(d)?;
        crate::dates::parse_date(&text).ok_or_else(|| serde::de::Error::custom(format!("invalid date {text:?}")))
    }
}

/// Identifies the label version a section came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionRef {
    pub product_id: String,
    pub version_date: NaiveDate,
    pub source_file: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("unparseable extraction reply ({reason}): {payload:?}")]
    ResponseFormat { reason: String, payload: String },
}

/// Asks the gateway for the adverse events in `section`. Empty sections
/// return an empty list without a gateway call.
pub fn extract_aes<G: TextGateway + ?Sized>(
    section: &str,
    version: &VersionRef,
    gateway: &G,
    cfg: &GatewayConfig,
) -> Result<Vec<RawAeTerm>, ExtractError> {
    if section.trim().is_empty() {
        return Ok(Vec::new());
    }
    let request = GatewayRequest {
        task: Task::ExtractAes,
        subject: section.to_string(),
        user_prompt: render(EXTRACT_PROMPT, &[("section", section)]),
    };
    let payload = gateway.complete(&request, cfg)?;
    let terms = parse_term_list(&payload).inspect_err(|e| {
        tracing::warn!(product = %version.product_id, "extraction reply rejected: {e}");
    })?;
    Ok(terms
        .into_iter()
        .map(|text| RawAeTerm {
            text,
            product_id: version.product_id.clone(),
            version_date: version.version_date,
            source_file: version.source_file.clone(),
        })
        .collect())
}

/// Parses a comma-separated reply into terms, in reply order. Code fences
/// and a one-word header line are tolerated.
pub fn parse_term_list(payload: &str) -> Result<Vec<String>, ExtractError> {
    let bad = |reason: &str| ExtractError::ResponseFormat {
        reason: reason.into(),
        payload: payload.into(),
    };
    let body: String = payload
        .lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n");
    let trimmed = body.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    if trimmed.starts_with(['{', '[', '<']) {
        return Err(bad("structured document instead of a term list"));
    }
    if trimmed.matches('"').count() % 2 == 1 {
        return Err(bad("unbalanced quotes"));
    }
    // The csv reader only honours quotes that open a field.
    let normalized = QUOTE_AFTER_SPACE.replace_all(trimmed, "$1\"");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(normalized.as_bytes());
    let mut terms = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(&e.to_string()))?;
        if i == 0 && record.len() == 1 && HEADER_WORDS.contains(&record[0].to_lowercase().as_str()) {
            continue;
        }
        for field in record.iter() {
            if field.chars().count() > MAX_TERM_CHARS {
                return Err(bad("field too long to be a term"));
            }
            if !field.is_empty() {
                terms.push(field.to_string());
            }
        }
    }
    Ok(terms)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CleaningRuleSpec {
    pub name: String,
    pub pattern: String,
    pub replacement: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CleaningRuleSet {
    pub version: String,
    pub rules: Vec<CleaningRuleSpec>,
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule {name}: {source}")]
    Pattern {
        name: String,
        #[source]
        source: regex::Error,
    },
    #[error("rule file {path}: {message}")]
    File { path: String, message: String },
}

/// Compiled annotation-stripping rules, applied in order until a term stops
/// changing.
#[derive(Debug, Clone)]
pub struct CleaningRules {
    pub version: String,
    rules: Vec<(Regex, String)>,
}

impl CleaningRules {
    pub fn compile(set: &CleaningRuleSet) -> Result<Self, RuleError> {
        let rules = set
            .rules
            .iter()
            .map(|r| {
                Regex::new(&r.pattern)
                    .map(|re| (re, r.replacement.clone()))
                    .map_err(|source| RuleError::Pattern {
                        name: r.name.clone(),
                        source,
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            version: set.version.clone(),
            rules,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RuleError> {
        let err = |message: String| RuleError::File {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let set: CleaningRuleSet = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Self::compile(&set)
    }

    pub fn clean(&self, term: &str) -> String {
        let mut current = term.trim().to_string();
        for _ in 0..16 {
            let mut next = current.clone();
            for (re, replacement) in &self.rules {
                next = re.replace_all(&next, replacement.as_str()).into_owned();
            }
            let next = next.trim().to_string();
            if next == current {
                break;
            }
            current = next;
        }
        current
    }
}

impl Default for CleaningRules {
    fn default() -> Self {
        let set: CleaningRuleSet = serde_json::from_str(DEFAULT_RULES).expect("bundled rules parse");
        Self::compile(&set).expect("bundled rules compile")
    }
}

/// Strips annotations, drops empties and collapses case-insensitive
/// duplicates within each (product, version) to their first occurrence.
pub fn clean_terms(terms: &[RawAeTerm], rules: &CleaningRules) -> Vec<RawAeTerm> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(terms.len());
    for term in terms {
        let text = rules.clean(&term.text);
        if text.is_empty() {
            continue;
        }
        let key = (text.to_lowercase(), term.product_id.clone(), term.version_date);
        if seen.insert(key) {
            out.push(RawAeTerm { text, ..term.clone() });
        }
    }
    out
}

pub const AE_FILE_COLUMNS: [&str; 4] = ["product_id", "version_date", "source_file", "term"];

pub fn terms_to_rows(terms: &[RawAeTerm]) -> Vec<Vec<String>> {
    terms
        .iter()
        .map(|t| {
            vec![
                t.product_id.clone(),
                dates::iso(t.version_date),
                t.source_file.clone(),
                t.text.clone(),
            ]
        })
        .collect()
}

pub fn terms_from_rows(rows: &[Vec<String>]) -> Vec<RawAeTerm> {
    rows.iter()
        .filter_map(|row| {
            Some(RawAeTerm {
                product_id: row.first()?.clone(),
                version_date: dates::parse_date(row.get(1)?)?,
                source_file: row.get(2)?.clone(),
                text: row.get(3)?.clone(),
            })
        })
        .collect()
}
