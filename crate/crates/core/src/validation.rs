//! Scoring extracted terms against reviewer gold lists, mapping-method
//! breakdowns, and reviewer overrides of the automatic mapping.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dates::parse_date;
use crate::meddra::{Code, Hierarchy, MappedTerm, MatchMethod};

/// Describes the accuracy denominator; copied into every report.
pub const ACCURACY_FORMULA: &str = "Correct / (Correct + Incorrect + Missing + Duplicate + Triplicate)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Correct,
    Incorrect,
    Missing,
    Duplicate,
    Triplicate,
}

impl Category {
    pub const ALL: [Category; 5] = [Self::Correct, Self::Incorrect, Self::Missing, Self::Duplicate, Self::Triplicate];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub item: String,
    pub category: Category,
}

fn norm(s: &str) -> String {
    s.trim().to_lowercase()
}

/// One verdict per distinct extracted term (Correct or Incorrect), one extra
/// verdict for repeats (Duplicate at two occurrences, Triplicate at three or
/// more) and one Missing per gold term never extracted.
pub fn judge<S: AsRef<str>, T: AsRef<str>>(extracted: &[S], gold: &[T]) -> Vec<Verdict> {
    let gold_set: BTreeSet<String> = gold.iter().map(|g| norm(g.as_ref())).filter(|g| !g.is_empty()).collect();
    let mut order = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for e in extracted {
        let t = norm(e.as_ref());
        if t.is_empty() {
            continue;
        }
        let c = counts.entry(t.clone()).or_default();
        if *c == 0 {
            order.push(t);
        }
        *c += 1;
    }
    let mut out = Vec::new();
    for t in &order {
        let category = if gold_set.contains(t) {
            Category::Correct
        } else {
            Category::Incorrect
        };
        out.push(Verdict {
            item: t.clone(),
            category,
        });
        match counts[t] {
            1 => {}
            2 => out.push(Verdict {
                item: t.clone(),
                category: Category::Duplicate,
            }),
            _ => out.push(Verdict {
                item: t.clone(),
                category: Category::Triplicate,
            }),
        }
    }
    let mut missing_seen = BTreeSet::new();
    for g in gold {
        let g = norm(g.as_ref());
        if !g.is_empty() && !counts.contains_key(&g) && missing_seen.insert(g.clone()) {
            out.push(Verdict {
                item: g,
                category: Category::Missing,
            });
        }
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("accuracy is undefined for an empty verdict list")]
pub struct EmptyVerdicts;

pub fn counts(verdicts: &[Verdict]) -> BTreeMap<Category, usize> {
    let mut out: BTreeMap<Category, usize> = Category::ALL.iter().map(|c| (*c, 0)).collect();
    for v in verdicts {
        *out.get_mut(&v.category).expect("all categories present") += 1;
    }
    out
}

pub fn accuracy(verdicts: &[Verdict]) -> Result<f64, EmptyVerdicts> {
    if verdicts.is_empty() {
        return Err(EmptyVerdicts);
    }
    let correct = verdicts.iter().filter(|v| v.category == Category::Correct).count();
    Ok(correct as f64 / verdicts.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MappingBreakdown {
    pub unique_terms: usize,
    pub counts: BTreeMap<String, usize>,
    pub fractions: BTreeMap<String, f64>,
    pub success: f64,
}

/// Fractions per match method over distinct raw terms (case-insensitive;
/// the first occurrence of a term decides its method).
pub fn mapping_breakdown(terms: &[MappedTerm]) -> MappingBreakdown {
    let mut seen = BTreeSet::new();
    let mut per: BTreeMap<MatchMethod, usize> = MatchMethod::ALL.iter().map(|m| (*m, 0)).collect();
    for t in terms {
        if seen.insert(norm(&t.raw)) {
            *per.get_mut(&t.method).expect("all methods present") += 1;
        }
    }
    let n = seen.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let success_count: usize = per.iter().filter(|(m, _)| m.is_success()).map(|(_, c)| c).sum();
    MappingBreakdown {
        unique_terms: n,
        counts: per.iter().map(|(m, c)| (m.label().to_string(), *c)).collect(),
        fractions: per.iter().map(|(m, c)| (m.label().to_string(), frac(*c))).collect(),
        success: frac(success_count),
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OverrideError {
    #[error("override PT codes not in the dictionary: {}", .0.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", "))]
    UnknownCodes(Vec<Code>),
    #[error("override for {term:?}: {message}")]
    Unresolvable { term: String, message: String },
}

pub type Overrides = BTreeMap<String, Code>;

/// Replaces the mapping of every term named in `overrides` with the given PT
/// and its full path, marked Manual. Rejects the whole set if any code is
/// unknown.
pub fn apply_manual_overrides(terms: &[MappedTerm], overrides: &Overrides, h: &Hierarchy) -> Result<Vec<MappedTerm>, OverrideError> {
    let unknown: Vec<Code> = overrides
        .values()
        .filter(|c| !h.contains_pt(**c))
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !unknown.is_empty() {
        return Err(OverrideError::UnknownCodes(unknown));
    }
    let mut paths = HashMap::new();
    for (term, code) in overrides {
        let path = h.resolve(*code).map_err(|e| OverrideError::Unresolvable {
            term: term.clone(),
            message: e.to_string(),
        })?;
        paths.insert(norm(term), path);
    }
    Ok(terms
        .iter()
        .map(|t| match paths.get(&norm(&t.raw)) {
            Some(path) => MappedTerm {
                raw: t.raw.clone(),
                path: Some(path.clone()),
                method: MatchMethod::Manual,
                note: String::new(),
            },
            None => t.clone(),
        })
        .collect())
}

pub const OVERRIDE_COLUMNS: [&str; 2] = ["term", "pt_code"];

pub fn overrides_from_rows(rows: &[Vec<String>]) -> Result<Overrides, String> {
    let mut out = Overrides::new();
    for (i, row) in rows.iter().enumerate() {
        let term = row.first().map(|s| s.trim()).unwrap_or("");
        let code = row.get(1).map(|s| s.trim()).unwrap_or("");
        if term.is_empty() && code.is_empty() {
            continue;
        }
        let code: Code = code.parse().map_err(|_| format!("override row {}: bad PT code {code:?}", i + 1))?;
        out.insert(term.to_string(), code);
    }
    Ok(out)
}

/// Reviewer list for one label version. A missing version date means the
/// product's latest version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldList {
    pub product_id: String,
    pub version_date: Option<NaiveDate>,
    pub terms: Vec<String>,
}

pub const GOLD_COLUMNS: [&str; 3] = ["product_id", "version_date", "term"];

pub fn gold_from_rows(rows: &[Vec<String>]) -> Vec<GoldList> {
    let mut grouped: BTreeMap<(String, Option<NaiveDate>), Vec<String>> = BTreeMap::new();
    for row in rows {
        let cell = |k: usize| row.get(k).map(|s| s.trim()).unwrap_or("");
        if cell(0).is_empty() || cell(2).is_empty() {
            continue;
        }
        grouped
            .entry((cell(0).to_string(), parse_date(cell(1))))
            .or_default()
            .push(cell(2).to_string());
    }
    grouped
        .into_iter()
        .map(|((product_id, version_date), terms)| GoldList {
            product_id,
            version_date,
            terms,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentScore {
    pub product_id: String,
    pub version_date: Option<NaiveDate>,
    pub counts: BTreeMap<Category, usize>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub accuracy_formula: String,
    pub documents: Vec<DocumentScore>,
    pub counts: BTreeMap<Category, usize>,
    pub extraction_accuracy: Option<f64>,
    pub mapping: MappingBreakdown,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn new(scored: Vec<(DocumentScore, Vec<Verdict>)>, mapping: MappingBreakdown, warnings: Vec<String>) -> Self {
        let all: Vec<Verdict> = scored.iter().flat_map(|(_, v)| v.iter().cloned()).collect();
        Self {
            accuracy_formula: ACCURACY_FORMULA.into(),
            documents: scored.into_iter().map(|(d, _)| d).collect(),
            counts: counts(&all),
            extraction_accuracy: accuracy(&all).ok(),
            mapping,
            warnings,
        }
    }
}

pub fn score_document(product_id: &str, version_date: Option<NaiveDate>, extracted: &[String], gold: &[String]) -> (DocumentScore, Vec<Verdict>) {
    let verdicts = judge(extracted, gold);
    (
        DocumentScore {
            product_id: product_id.to_string(),
            version_date,
            counts: counts(&verdicts),
            accuracy: accuracy(&verdicts).ok(),
        },
        verdicts,
    )
}
