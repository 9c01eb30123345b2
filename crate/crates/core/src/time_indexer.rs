//! First-appearance dating of adverse events across ordered label versions.
//!
//! The model is additions-only: an AE is dated by the earliest version that
//! lists it, and dropping it from a later version has no effect.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dates::{iso, iso_opt, parse_date};
use crate::meddra::{mapping_from_rows, mapping_to_rows, Code, MappedTerm, MAPPING_COLUMNS};

pub const DEFAULT_DATA_LOCK: (i32, u32, u32) = (2025, 12, 15);

pub fn default_data_lock() -> NaiveDate {
    let (y, m, d) = DEFAULT_DATA_LOCK;
    NaiveDate::from_ymd_opt(y, m, d).expect("valid lock date")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "Clinical Trial (Baseline)")]
    Baseline,
    #[serde(rename = "Post-Approval Discovery")]
    PostApproval,
}

impl Source {
    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "Clinical Trial (Baseline)",
            Self::PostApproval => "Post-Approval Discovery",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        [Self::Baseline, Self::PostApproval].into_iter().find(|v| v.label() == s.trim())
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// What counts as "the same AE" between versions: the mapped PT when there
/// is one, else the lower-cased raw wording.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AeKey {
    Pt(Code),
    Raw(String),
}

impl AeKey {
    pub fn of(term: &MappedTerm) -> Self {
        match &term.path {
            Some(p) => Self::Pt(p.pt.code),
            None => Self::Raw(term.raw.trim().to_lowercase()),
        }
    }
}

impl fmt::Display for AeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Pt(c) => write!(f, "pt:{c}"),
            Self::Raw(s) => write!(f, "raw:{s}"),
        }
    }
}

/// One label version with its mapped AE set.
#[derive(Debug, Clone, PartialEq)]
pub struct VersionAes {
    pub version_date: NaiveDate,
    pub is_initial: bool,
    pub source_file: String,
    pub procedure_id: String,
    pub terms: Vec<MappedTerm>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub product_id: String,
    pub date_added: NaiveDate,
    pub source: Source,
    pub reference_date: Option<NaiveDate>,
    pub procedure_id: String,
    pub source_file: String,
    /// The term as mapped in the version that introduced it.
    pub term: MappedTerm,
}

impl TimelineEntry {
    pub fn key(&self) -> AeKey {
        AeKey::of(&self.term)
    }

    pub fn pt_code(&self) -> Option<Code> {
        self.term.path.as_ref().map(|p| p.pt.code)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("product {product_id} has no label versions")]
pub struct EmptyTimelineError {
    pub product_id: String,
}

/// Dates every distinct AE of one product by its first appearance.
/// Versions are sorted by date here; equal dates keep input order. The
/// baseline date is that of the version flagged initial, or the earliest.
pub fn build_timeline(product_id: &str, versions: &[VersionAes]) -> Result<Vec<TimelineEntry>, EmptyTimelineError> {
    if versions.is_empty() {
        return Err(EmptyTimelineError {
            product_id: product_id.to_string(),
        });
    }
    let mut ordered: Vec<&VersionAes> = versions.iter().collect();
    ordered.sort_by_key(|v| v.version_date);
    let baseline = ordered
        .iter()
        .find(|v| v.is_initial)
        .unwrap_or(&ordered[0])
        .version_date;

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for v in ordered {
        for term in &v.terms {
            if seen.insert(AeKey::of(term)) {
                entries.push(TimelineEntry {
                    product_id: product_id.to_string(),
                    date_added: v.version_date,
                    source: if v.version_date == baseline {
                        Source::Baseline
                    } else {
                        Source::PostApproval
                    },
                    reference_date: None,
                    procedure_id: v.procedure_id.clone(),
                    source_file: v.source_file.clone(),
                    term: term.clone(),
                });
            }
        }
    }
    Ok(entries)
}

pub type PracDates = BTreeMap<(String, String), NaiveDate>;

/// Fills `reference_date` from a (product, procedure) → date table. Rows for
/// products with no entries are reported back as warnings.
pub fn attach_reference_dates(entries: &mut [TimelineEntry], prac: Option<&PracDates>) -> Vec<String> {
    let Some(prac) = prac else {
        return Vec::new();
    };
    for e in entries.iter_mut() {
        e.reference_date = prac.get(&(e.product_id.clone(), e.procedure_id.clone())).copied();
    }
    let known: BTreeSet<&str> = entries.iter().map(|e| e.product_id.as_str()).collect();
    let mut warnings = Vec::new();
    for (product, procedure) in prac.keys() {
        if !known.contains(product.as_str()) {
            let w = format!("reference date for unknown product {product} (procedure {procedure}) ignored");
            tracing::warn!("{w}");
            warnings.push(w);
        }
    }
    warnings
}

pub const PRAC_COLUMNS: [&str; 3] = ["product_id", "procedure_id", "reference_date"];

pub fn prac_from_rows(rows: &[Vec<String>]) -> (PracDates, Vec<String>) {
    let mut out = PracDates::new();
    let mut warnings = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        match (row.first(), row.get(1), row.get(2).and_then(|d| parse_date(d))) {
            (Some(p), Some(proc_id), Some(date)) => {
                out.insert((p.trim().to_string(), proc_id.trim().to_string()), date);
            }
            _ => warnings.push(format!("reference date row {} unusable", i + 1)),
        }
    }
    (out, warnings)
}

/// Inputs for time-to-first-update.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductDates {
    pub product_id: String,
    pub authorisation_date: Option<NaiveDate>,
    /// All version dates; the earliest is the initial label.
    pub version_dates: Vec<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Duration {
    pub product_id: String,
    pub days: i64,
    pub event: bool,
}

/// Days from authorisation to the first version after the initial one, or
/// to `lock` (censored) when there is none.
pub fn first_update_durations(products: &[ProductDates], lock: NaiveDate) -> (Vec<Duration>, Vec<String>) {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for p in products {
        let Some(auth) = p.authorisation_date else {
            warnings.push(format!("{}: no authorisation date, excluded from time-to-update", p.product_id));
            continue;
        };
        let mut dates = p.version_dates.clone();
        dates.sort();
        dates.dedup();
        let (end, event) = match dates.get(1) {
            Some(d) if *d <= lock => (*d, true),
            _ => (lock, false),
        };
        let days = (end - auth).num_days();
        if days < 0 {
            warnings.push(format!(
                "{}: first update {} precedes authorisation {}, excluded",
                p.product_id,
                iso(end),
                iso(auth)
            ));
            continue;
        }
        out.push(Duration {
            product_id: p.product_id.clone(),
            days,
            event,
        });
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    (out, warnings)
}

pub fn timeline_columns() -> Vec<&'static str> {
    let mut cols = vec![
        "product_id",
        "ae_key",
        "date_added",
        "source",
        "reference_date",
        "procedure_id",
        "source_file",
    ];
    cols.extend(MAPPING_COLUMNS);
    cols
}

pub fn timeline_to_rows(entries: &[TimelineEntry]) -> Vec<Vec<String>> {
    let terms: Vec<MappedTerm> = entries.iter().map(|e| e.term.clone()).collect();
    entries
        .iter()
        .zip(mapping_to_rows(&terms))
        .map(|(e, mapping)| {
            let mut row = vec![
                e.product_id.clone(),
                e.key().to_string(),
                iso(e.date_added),
                e.source.label().to_string(),
                iso_opt(e.reference_date),
                e.procedure_id.clone(),
                e.source_file.clone(),
            ];
            row.extend(mapping);
            row
        })
        .collect()
}

pub fn timeline_from_rows(rows: &[Vec<String>]) -> Result<Vec<TimelineEntry>, String> {
    let tails: Vec<Vec<String>> = rows.iter().map(|r| r.iter().skip(7).cloned().collect()).collect();
    let terms = mapping_from_rows(&tails)?;
    rows.iter()
        .zip(terms)
        .enumerate()
        .map(|(i, (row, term))| {
            let cell = |k: usize| row.get(k).map(String::as_str).unwrap_or("");
            Ok(TimelineEntry {
                product_id: cell(0).to_string(),
                date_added: parse_date(cell(2)).ok_or_else(|| format!("row {}: bad date_added", i + 1))?,
                source: Source::from_label(cell(3)).ok_or_else(|| format!("row {}: bad source", i + 1))?,
                reference_date: parse_date(cell(4)),
                procedure_id: cell(5).to_string(),
                source_file: cell(6).to_string(),
                term,
            })
        })
        .collect()
}
