//! Descriptive statistics over the assembled dataset and plot-ready tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use chrono::Datelike;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DrugAeAssociation;
use crate::dates::parse_date;
use crate::fsutil::{csv_bytes, write_if_changed};
use crate::time_indexer::Source;

pub const UNKNOWN: &str = "Unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub key: String,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub rows: Vec<DistributionRow>,
    /// Rows left out, e.g. for an unparseable date.
    pub excluded: usize,
}

impl DistributionTable {
    fn from_counts(counts: impl IntoIterator<Item = (String, usize)>, excluded: usize) -> Self {
        let counts: Vec<(String, usize)> = counts.into_iter().collect();
        let total: usize = counts.iter().map(|(_, c)| c).sum();
        Self {
            rows: counts
                .into_iter()
                .map(|(key, count)| DistributionRow {
                    key,
                    count,
                    fraction: if total == 0 { 0.0 } else { count as f64 / total as f64 },
                })
                .collect(),
            excluded,
        }
    }

    /// Largest count first, ties by key.
    fn sorted_desc(mut self) -> Self {
        self.rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.key.cmp(&b.key)));
        self
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn get(&self, key: &str) -> Option<&DistributionRow> {
        self.rows.iter().find(|r| r.key == key)
    }
}

fn year_of(row: &DrugAeAssociation) -> Option<i32> {
    parse_date(&row.date_added).map(|d| d.year())
}

fn or_unknown(s: &str) -> String {
    if s.trim().is_empty() {
        UNKNOWN.to_string()
    } else {
        s.trim().to_string()
    }
}

/// Association identity across products: the PT code, or the lower-cased
/// raw term when unmapped.
fn pt_key(row: &DrugAeAssociation) -> String {
    if row.pt_code.is_empty() {
        format!("raw:{}", row.extracted_ae.trim().to_lowercase())
    } else {
        row.pt_code.clone()
    }
}

pub fn annual_additions(rows: &[DrugAeAssociation], post_approval_only: bool) -> DistributionTable {
    let mut per_year: BTreeMap<i32, usize> = BTreeMap::new();
    let mut excluded = 0;
    for r in rows {
        if post_approval_only && r.source != Source::PostApproval.label() {
            continue;
        }
        match year_of(r) {
            Some(y) => *per_year.entry(y).or_default() += 1,
            None => excluded += 1,
        }
    }
    DistributionTable::from_counts(per_year.into_iter().map(|(y, c)| (y.to_string(), c)), excluded)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CumulativeRow {
    pub year: i32,
    pub added: usize,
    pub cumulative: usize,
}

/// Running total per year that has additions. Rows with unparseable dates
/// are counted in the second value.
pub fn cumulative_growth(rows: &[DrugAeAssociation]) -> (Vec<CumulativeRow>, usize) {
    let annual = annual_additions(rows, false);
    let mut total = 0;
    let out = annual
        .rows
        .iter()
        .map(|r| {
            total += r.count;
            CumulativeRow {
                year: r.key.parse().expect("year keys"),
                added: r.count,
                cumulative: total,
            }
        })
        .collect();
    (out, annual.excluded)
}

pub fn source_split(rows: &[DrugAeAssociation]) -> DistributionTable {
    let mut counts: BTreeMap<&str, usize> = [Source::Baseline.label(), Source::PostApproval.label()]
        .into_iter()
        .map(|k| (k, 0))
        .collect();
    let mut excluded = 0;
    for r in rows {
        match counts.get_mut(r.source.as_str()) {
            Some(c) => *c += 1,
            None => excluded += 1,
        }
    }
    DistributionTable::from_counts(
        [Source::Baseline, Source::PostApproval].map(|s| (s.label().to_string(), counts[s.label()])),
        excluded,
    )
}

/// Regulatory procedure types of post-approval additions.
pub fn procedure_type_distribution(rows: &[DrugAeAssociation]) -> DistributionTable {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.source == Source::PostApproval.label()) {
        *counts.entry(or_unknown(&r.procedure)).or_default() += 1;
    }
    DistributionTable::from_counts(counts, 0).sorted_desc()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurvivalError {
    #[error("no durations")]
    Empty,
    #[error("invalid duration {0}")]
    Invalid(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalStep {
    pub time: f64,
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
    pub survival: f64,
}

/// Product-limit estimate. Steps exist only at event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub subjects: usize,
    pub steps: Vec<SurvivalStep>,
    /// First event time with survival at or below one half.
    pub median: Option<f64>,
}

impl SurvivalCurve {
    pub fn survival_at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|s| s.time <= t)
            .last()
            .map_or(1.0, |s| s.survival)
    }
}

/// Kaplan-Meier estimate from (duration, event observed) pairs.
pub fn km_estimate(durations: &[(f64, bool)]) -> Result<SurvivalCurve, SurvivalError> {
    if durations.is_empty() {
        return Err(SurvivalError::Empty);
    }
    if let Some((t, _)) = durations.iter().find(|(t, _)| !t.is_finite() || *t < 0.0) {
        return Err(SurvivalError::Invalid(*t));
    }
    let mut sorted = durations.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut at_risk = sorted.len();
    let mut s = 1.0;
    let mut steps = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let (mut events, mut censored) = (0, 0);
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                events += 1;
            } else {
                censored += 1;
            }
            i += 1;
        }
        if events > 0 {
            s *= 1.0 - events as f64 / at_risk as f64;
            steps.push(SurvivalStep {
                time: t,
                at_risk,
                events,
                censored,
                survival: s,
            });
        }
        at_risk -= events + censored;
    }
    let median = steps.iter().find(|st| st.survival <= 0.5).map(|st| st.time);
    Ok(SurvivalCurve {
        subjects: durations.len(),
        steps,
        median,
    })
}

/// Upper bounds of the products-per-PT buckets; the last bucket is open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UbiquityBuckets(pub Vec<usize>);

impl Default for UbiquityBuckets {
    fn default() -> Self {
        Self(vec![1, 10, 100])
    }
}

impl UbiquityBuckets {
    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut lo = 1;
        for &hi in &self.0 {
            out.push(if lo == hi { lo.to_string() } else { format!("{lo}-{hi}") });
            lo = hi + 1;
        }
        out.push(format!(">{}", lo - 1));
        out
    }

    fn index(&self, n: usize) -> usize {
        self.0.iter().position(|&hi| n <= hi).unwrap_or(self.0.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ubiquity {
    pub table: DistributionTable,
    pub unique_pts: usize,
    pub single_product_fraction: f64,
}

pub fn ubiquity(rows: &[DrugAeAssociation], buckets: &UbiquityBuckets) -> Ubiquity {
    let mut products: HashMap<String, BTreeSet<&str>> = HashMap::new();
    for r in rows {
        products.entry(pt_key(r)).or_default().insert(r.eu_number.as_str());
    }
    let labels = buckets.labels();
    let mut counts = vec![0usize; labels.len()];
    let mut single = 0;
    for set in products.values() {
        counts[buckets.index(set.len())] += 1;
        if set.len() == 1 {
            single += 1;
        }
    }
    let n = products.len();
    Ubiquity {
        table: DistributionTable::from_counts(labels.into_iter().zip(counts), 0),
        unique_pts: n,
        single_product_fraction: if n == 0 { 0.0 } else { single as f64 / n as f64 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile on sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary::default();
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Summary {
        n: v.len(),
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductDensity {
    pub eu_number: String,
    pub brand_name: String,
    pub atc_level_1: String,
    pub unique_pts: usize,
    pub unique_socs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub products: Vec<ProductDensity>,
    pub pts: Summary,
    pub socs: Summary,
    /// SOC-count summaries per ATC level-1 group.
    pub socs_by_atc: BTreeMap<String, Summary>,
}

pub fn per_drug_density(rows: &[DrugAeAssociation]) -> Density {
    let mut per: BTreeMap<&str, (BTreeSet<String>, BTreeSet<&str>, &DrugAeAssociation)> = BTreeMap::new();
    for r in rows {
        let e = per.entry(r.eu_number.as_str()).or_insert_with(|| (BTreeSet::new(), BTreeSet::new(), r));
        e.0.insert(pt_key(r));
        if !r.soc_code.is_empty() {
            e.1.insert(r.soc_code.as_str());
        }
    }
    let products: Vec<ProductDensity> = per
        .into_iter()
        .map(|(eu, (pts, socs, first))| ProductDensity {
            eu_number: eu.to_string(),
            brand_name: first.brand_name.clone(),
            atc_level_1: or_unknown(&first.atc1_code),
            unique_pts: pts.len(),
            unique_socs: socs.len(),
        })
        .collect();
    let mut by_atc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in &products {
        by_atc.entry(p.atc_level_1.clone()).or_default().push(p.unique_socs as f64);
    }
    Density {
        pts: summarize(&products.iter().map(|p| p.unique_pts as f64).collect::<Vec<_>>()),
        socs: summarize(&products.iter().map(|p| p.unique_socs as f64).collect::<Vec<_>>()),
        socs_by_atc: by_atc.into_iter().map(|(k, v)| (k, summarize(&v))).collect(),
        products,
    }
}

pub fn atc_level1_distribution(rows: &[DrugAeAssociation]) -> DistributionTable {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in rows {
        *counts.entry(or_unknown(&r.atc1_code)).or_default() += 1;
    }
    DistributionTable::from_counts(counts, 0).sorted_desc()
}

pub fn soc_distribution(rows: &[DrugAeAssociation]) -> DistributionTable {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in rows {
        *counts.entry(or_unknown(&r.soc_term)).or_default() += 1;
    }
    DistributionTable::from_counts(counts, 0).sorted_desc()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtcBranch {
    pub level_1: String,
    pub level_2: String,
    pub count: usize,
    /// Share of all rows.
    pub fraction: f64,
    /// Share within the level-1 group.
    pub fraction_of_level_1: f64,
}

pub fn atc_hierarchy(rows: &[DrugAeAssociation]) -> Vec<AtcBranch> {
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut l1: BTreeMap<String, usize> = BTreeMap::new();
    for r in rows {
        let a = or_unknown(&r.atc1_code);
        *counts.entry((a.clone(), or_unknown(&r.atc2_code))).or_default() += 1;
        *l1.entry(a).or_default() += 1;
    }
    let total = rows.len().max(1) as f64;
    counts
        .into_iter()
        .map(|((level_1, level_2), count)| {
            let group = l1[&level_1] as f64;
            AtcBranch {
                fraction: count as f64 / total,
                fraction_of_level_1: count as f64 / group,
                level_1,
                level_2,
                count,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocSourceRow {
    pub soc: String,
    pub baseline: usize,
    pub post_approval: usize,
    pub baseline_fraction: f64,
    pub post_approval_fraction: f64,
}

/// Per-SOC Baseline / Post-Approval split; fractions are within each source.
pub fn soc_by_source(rows: &[DrugAeAssociation]) -> Vec<SocSourceRow> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in rows {
        let e = counts.entry(or_unknown(&r.soc_term)).or_default();
        if r.source == Source::Baseline.label() {
            e.0 += 1;
        } else if r.source == Source::PostApproval.label() {
            e.1 += 1;
        }
    }
    let tb: usize = counts.values().map(|c| c.0).sum();
    let tp: usize = counts.values().map(|c| c.1).sum();
    let frac = |c: usize, t: usize| if t == 0 { 0.0 } else { c as f64 / t as f64 };
    let mut out: Vec<SocSourceRow> = counts
        .into_iter()
        .map(|(soc, (b, p))| SocSourceRow {
            soc,
            baseline: b,
            post_approval: p,
            baseline_fraction: frac(b, tb),
            post_approval_fraction: frac(p, tp),
        })
        .collect();
    out.sort_by(|a, b| (b.baseline + b.post_approval).cmp(&(a.baseline + a.post_approval)).then_with(|| a.soc.cmp(&b.soc)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrugTypeRow {
    pub soc: String,
    pub biologic: usize,
    pub small_molecule: usize,
    pub biologic_pct: f64,
    pub small_molecule_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrugTypeComparison {
    pub rows: Vec<DrugTypeRow>,
    pub biologic_rows: usize,
    pub small_molecule_rows: usize,
    /// INNs not on the biologic list, classified small-molecule by default.
    pub defaulted_inns: usize,
}

/// SOC percentages per cohort over the `top_n` SOCs by combined count
/// (Unknown excluded). Each cohort is normalised over its own rows inside
/// those SOCs.
pub fn drug_type_comparison(rows: &[DrugAeAssociation], biologics: &BTreeSet<String>, top_n: usize) -> DrugTypeComparison {
    let biologics: BTreeSet<String> = biologics.iter().map(|b| b.trim().to_lowercase()).collect();
    let is_bio = |r: &DrugAeAssociation| biologics.contains(&r.inn.trim().to_lowercase());
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut defaulted = BTreeSet::new();
    let (mut bio_rows, mut small_rows) = (0, 0);
    for r in rows {
        let bio = is_bio(r);
        if bio {
            bio_rows += 1;
        } else {
            small_rows += 1;
            defaulted.insert(r.inn.trim().to_lowercase());
        }
        if r.soc_term.trim().is_empty() {
            continue;
        }
        let e = per.entry(r.soc_term.clone()).or_default();
        if bio {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    let mut socs: Vec<(String, (usize, usize))> = per.into_iter().collect();
    socs.sort_by(|a, b| (b.1 .0 + b.1 .1).cmp(&(a.1 .0 + a.1 .1)).then_with(|| a.0.cmp(&b.0)));
    socs.truncate(top_n);
    let tb: usize = socs.iter().map(|s| s.1 .0).sum();
    let ts: usize = socs.iter().map(|s| s.1 .1).sum();
    let pct = |c: usize, t: usize| if t == 0 { 0.0 } else { 100.0 * c as f64 / t as f64 };
    DrugTypeComparison {
        rows: socs
            .into_iter()
            .map(|(soc, (b, s))| DrugTypeRow {
                soc,
                biologic: b,
                small_molecule: s,
                biologic_pct: pct(b, tb),
                small_molecule_pct: pct(s, ts),
            })
            .collect(),
        biologic_rows: bio_rows,
        small_molecule_rows: small_rows,
        defaulted_inns: defaulted.len(),
    }
}

/// Count of PTs per year of their first appearance anywhere in the corpus.
/// Only coded PTs count.
pub fn new_pt_introduction(rows: &[DrugAeAssociation]) -> Vec<(i32, usize)> {
    let mut first: HashMap<&str, i32> = HashMap::new();
    for r in rows.iter().filter(|r| !r.pt_code.is_empty()) {
        if let Some(y) = year_of(r) {
            first.entry(r.pt_code.as_str()).and_modify(|e| *e = (*e).min(y)).or_insert(y);
        }
    }
    let mut per: BTreeMap<i32, usize> = BTreeMap::new();
    for y in first.values() {
        *per.entry(*y).or_default() += 1;
    }
    per.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticsConfig {
    pub ubiquity_buckets: UbiquityBuckets,
    pub top_socs: usize,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        Self {
            ubiquity_buckets: UbiquityBuckets::default(),
            top_socs: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsSummary {
    pub associations: usize,
    pub products: usize,
    pub first_year: Option<i32>,
    pub last_year: Option<i32>,
    pub excluded_undated: usize,
    pub baseline: usize,
    pub baseline_fraction: f64,
    pub post_approval: usize,
    pub post_approval_fraction: f64,
    pub post_approval_peak_year: Option<i32>,
    pub km_subjects: usize,
    pub km_median_days: Option<f64>,
    pub km_median_years: Option<f64>,
    pub unique_pts: usize,
    pub single_product_pt_fraction: f64,
    pub pts_per_drug: Summary,
    pub socs_per_drug: Summary,
    pub top_atc_level_1: Option<DistributionRow>,
    pub top_soc: Option<DistributionRow>,
    pub biologic_rows: usize,
    pub small_molecule_rows: usize,
    pub defaulted_inns: usize,
    pub warnings: Vec<String>,
}

/// A named CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticsOutput {
    pub tables: Vec<Table>,
    pub summary: AnalyticsSummary,
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn dist_rows(t: &DistributionTable) -> Vec<Vec<String>> {
    t.rows.iter().map(|r| vec![r.key.clone(), r.count.to_string(), f(r.fraction)]).collect()
}

/// Every analysis over one dataset. `durations` are (days, event) pairs for
/// time to first update.
pub fn analyze(
    rows: &[DrugAeAssociation],
    durations: &[(f64, bool)],
    biologics: &BTreeSet<String>,
    cfg: &AnalyticsConfig,
) -> AnalyticsOutput {
    let mut warnings = Vec::new();
    let (growth, excluded) = cumulative_growth(rows);
    if excluded > 0 {
        warnings.push(format!("{excluded} rows without a parseable Date Added excluded from yearly tables"));
    }
    let post = annual_additions(rows, true);
    let procedures = procedure_type_distribution(rows);
    let km = match km_estimate(durations) {
        Ok(c) => Some(c),
        Err(e) => {
            warnings.push(format!("time to first update: {e}"));
            None
        }
    };
    let new_pts = new_pt_introduction(rows);
    let drug_type = drug_type_comparison(rows, biologics, cfg.top_socs);
    if biologics.is_empty() {
        warnings.push("biologic list is empty; the biologic cohort has no rows".into());
    }
    let atc1 = atc_level1_distribution(rows);
    let by_source = soc_by_source(rows);
    let ubiq = ubiquity(rows, &cfg.ubiquity_buckets);
    let hierarchy = atc_hierarchy(rows);
    let density = per_drug_density(rows);
    let split = source_split(rows);
    let socs = soc_distribution(rows);

    let tables = vec![
        Table {
            name: "cumulative_growth",
            header: vec!["year", "added", "cumulative"],
            rows: growth
                .iter()
                .map(|g| vec![g.year.to_string(), g.added.to_string(), g.cumulative.to_string()])
                .collect(),
        },
        Table {
            name: "post_approval_additions",
            header: vec!["year", "count", "fraction"],
            rows: dist_rows(&post),
        },
        Table {
            name: "procedure_types",
            header: vec!["procedure", "count", "fraction"],
            rows: dist_rows(&procedures),
        },
        Table {
            name: "time_to_first_update",
            header: vec!["time_days", "at_risk", "events", "censored", "survival"],
            rows: km
                .iter()
                .flat_map(|c| &c.steps)
                .map(|s| vec![s.time.to_string(), s.at_risk.to_string(), s.events.to_string(), s.censored.to_string(), f(s.survival)])
                .collect(),
        },
        Table {
            name: "new_pts",
            header: vec!["year", "new_pts"],
            rows: new_pts.iter().map(|(y, c)| vec![y.to_string(), c.to_string()]).collect(),
        },
        Table {
            name: "drug_type_socs",
            header: vec!["soc", "biologic", "small_molecule", "biologic_pct", "small_molecule_pct"],
            rows: drug_type
                .rows
                .iter()
                .map(|r| vec![r.soc.clone(), r.biologic.to_string(), r.small_molecule.to_string(), f(r.biologic_pct), f(r.small_molecule_pct)])
                .collect(),
        },
        Table {
            name: "atc_level_1",
            header: vec!["atc_level_1", "count", "fraction"],
            rows: dist_rows(&atc1),
        },
        Table {
            name: "soc_by_source",
            header: vec!["soc", "baseline", "post_approval", "baseline_fraction", "post_approval_fraction"],
            rows: by_source
                .iter()
                .map(|r| vec![r.soc.clone(), r.baseline.to_string(), r.post_approval.to_string(), f(r.baseline_fraction), f(r.post_approval_fraction)])
                .collect(),
        },
        Table {
            name: "ubiquity",
            header: vec!["products_per_pt", "pts", "fraction"],
            rows: dist_rows(&ubiq.table),
        },
        Table {
            name: "atc_hierarchy",
            header: vec!["atc_level_1", "atc_level_2", "count", "fraction", "fraction_of_level_1"],
            rows: hierarchy
                .iter()
                .map(|b| vec![b.level_1.clone(), b.level_2.clone(), b.count.to_string(), f(b.fraction), f(b.fraction_of_level_1)])
                .collect(),
        },
        Table {
            name: "pts_per_drug",
            header: vec!["eu_number", "brand_name", "unique_pts"],
            rows: density
                .products
                .iter()
                .map(|p| vec![p.eu_number.clone(), p.brand_name.clone(), p.unique_pts.to_string()])
                .collect(),
        },
        Table {
            name: "socs_per_drug",
            header: vec!["eu_number", "brand_name", "atc_level_1", "unique_socs"],
            rows: density
                .products
                .iter()
                .map(|p| vec![p.eu_number.clone(), p.brand_name.clone(), p.atc_level_1.clone(), p.unique_socs.to_string()])
                .collect(),
        },
        Table {
            name: "soc_distribution",
            header: vec!["soc", "count", "fraction"],
            rows: dist_rows(&socs),
        },
    ];

    let peak = post.rows.iter().max_by(|a, b| a.count.cmp(&b.count).then_with(|| b.key.cmp(&a.key)));
    let frac_of = |label: &str| split.get(label).map_or((0, 0.0), |r| (r.count, r.fraction));
    let (baseline, baseline_fraction) = frac_of(Source::Baseline.label());
    let (post_approval, post_approval_fraction) = frac_of(Source::PostApproval.label());
    let summary = AnalyticsSummary {
        associations: rows.len(),
        products: density.products.len(),
        first_year: growth.first().map(|g| g.year),
        last_year: growth.last().map(|g| g.year),
        excluded_undated: excluded,
        baseline,
        baseline_fraction,
        post_approval,
        post_approval_fraction,
        post_approval_peak_year: peak.map(|p| p.key.parse().expect("year keys")),
        km_subjects: km.as_ref().map_or(0, |c| c.subjects),
        km_median_days: km.as_ref().and_then(|c| c.median),
        km_median_years: km.as_ref().and_then(|c| c.median).map(|d| d / 365.25),
        unique_pts: ubiq.unique_pts,
        single_product_pt_fraction: ubiq.single_product_fraction,
        pts_per_drug: density.pts,
        socs_per_drug: density.socs,
        top_atc_level_1: atc1.rows.first().cloned(),
        top_soc: socs.rows.first().cloned(),
        biologic_rows: drug_type.biologic_rows,
        small_molecule_rows: drug_type.small_molecule_rows,
        defaulted_inns: drug_type.defaulted_inns,
        warnings,
    };
    AnalyticsOutput { tables, summary }
}

pub const SUMMARY_FILE: &str = "summary.json";

pub fn write_outputs(out: &AnalyticsOutput, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for t in &out.tables {
        let path = dir.join(format!("{}.csv", t.name));
        write_if_changed(&path, &csv_bytes(&t.header, &t.rows))?;
        paths.push(path);
    }
    let path = dir.join(SUMMARY_FILE);
    let mut json = serde_json::to_vec_pretty(&out.summary).map_err(std::io::Error::other)?;
    json.push(b'\n');
    write_if_changed(&path, &json)?;
    paths.push(path);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(eu: &str, date: &str, source: Source, pt: &str, soc: &str, atc1: &str) -> DrugAeAssociation {
        DrugAeAssociation {
            eu_number: eu.into(),
            date_added: date.into(),
            source: source.label().into(),
            pt_code: pt.into(),
            extracted_ae: format!("term {pt}"),
            soc_term: soc.into(),
            soc_code: if soc.is_empty() { String::new() } else { format!("c-{soc}") },
            atc1_code: atc1.into(),
            ..DrugAeAssociation::default()
        }
    }

    #[test]
    fn growth_and_annual() {
        let rows = [
            row("a", "1999-03-01", Source::Baseline, "1", "", ""),
            row("a", "2001-03-01", Source::PostApproval, "2", "", ""),
            row("a", "not a date", Source::PostApproval, "3", "", ""),
        ];
        let (g, excluded) = cumulative_growth(&rows);
        assert_eq!(g, [CumulativeRow { year: 1999, added: 1, cumulative: 1 }, CumulativeRow { year: 2001, added: 1, cumulative: 2 }]);
        assert_eq!(excluded, 1);
        assert!(cumulative_growth(&[]).0.is_empty());
        let post = annual_additions(&rows, true);
        assert_eq!(post.rows.len(), 1);
        assert_eq!(post.excluded, 1);
        assert_eq!(annual_additions(&rows, false).get("1999").unwrap().count, 1);
    }

    #[test]
    fn peak_year() {
        let mut rows: Vec<_> = (0..3).map(|i| row("a", "2012-05-01", Source::PostApproval, &i.to_string(), "", "")).collect();
        rows.push(row("a", "2013-05-01", Source::PostApproval, "9", "", ""));
        rows.push(row("a", "2000-05-01", Source::Baseline, "8", "", ""));
        rows.push(row("a", "2000-05-01", Source::Baseline, "7", "", ""));
        rows.push(row("a", "2000-05-01", Source::Baseline, "6", "", ""));
        rows.push(row("a", "2000-05-01", Source::Baseline, "5", "", ""));
        let out = analyze(&rows, &[(1.0, true)], &BTreeSet::new(), &AnalyticsConfig::default());
        assert_eq!(out.summary.post_approval_peak_year, Some(2012));
        let all = annual_additions(&rows, false);
        assert_eq!(all.get("2000").unwrap().count, 4);
    }

    #[test]
    fn split() {
        let mut rows: Vec<_> = (0..3).map(|i| row("a", "2000-01-01", Source::Baseline, &i.to_string(), "", "")).collect();
        rows.push(row("a", "2001-01-01", Source::PostApproval, "9", "", ""));
        let s = source_split(&rows);
        assert_eq!(s.rows[0].fraction, 0.75);
        assert_eq!(s.rows[1].fraction, 0.25);
        let s = source_split(&rows[..3]);
        assert_eq!((s.rows[0].fraction, s.rows[1].fraction), (1.0, 0.0));
    }

    #[test]
    fn km_small_example() {
        let c = km_estimate(&[(1.0, true), (2.0, true), (3.0, true)]).unwrap();
        let s: Vec<f64> = c.steps.iter().map(|s| s.survival).collect();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s[2], 0.0);
        assert_eq!(c.median, Some(2.0));
        assert_eq!(c.survival_at(0.5), 1.0);
        assert_eq!(c.survival_at(2.5), s[1]);
    }

    #[test]
    fn km_censoring() {
        let c = km_estimate(&[(5.0, false), (6.0, false)]).unwrap();
        assert!(c.steps.is_empty());
        assert_eq!(c.median, None);
        assert_eq!(c.survival_at(100.0), 1.0);
        // 4 at risk, one event at 1, one censored at 2, events at 3 and 4
        let c = km_estimate(&[(1.0, true), (2.0, false), (3.0, true), (4.0, true)]).unwrap();
        assert_eq!(c.steps.len(), 3);
        assert!((c.steps[1].survival - 0.75 * 0.5).abs() < 1e-15);
        assert_eq!(c.steps[1].at_risk, 2);
        assert!(km_estimate(&[]).is_err());
        assert!(km_estimate(&[(-1.0, true)]).is_err());
    }

    #[test]
    fn ubiquity_buckets() {
        let rows = [
            row("p1", "2000-01-01", Source::Baseline, "1", "", ""),
            row("p2", "2000-01-01", Source::Baseline, "2", "", ""),
            row("p1", "2000-01-01", Source::Baseline, "3", "", ""),
            row("p2", "2000-01-01", Source::Baseline, "3", "", ""),
            row("p3", "2000-01-01", Source::Baseline, "3", "", ""),
        ];
        let u = ubiquity(&rows, &UbiquityBuckets::default());
        assert!((u.single_product_fraction - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(UbiquityBuckets::default().labels(), ["1", "2-10", "11-100", ">100"]);
        assert_eq!(u.table.get("2-10").unwrap().count, 1);
        let everywhere: Vec<_> = ["p1", "p2"].iter().map(|p| row(p, "2000-01-01", Source::Baseline, "1", "", "")).collect();
        assert_eq!(ubiquity(&everywhere, &UbiquityBuckets::default()).table.get("1").unwrap().fraction, 0.0);
    }

    #[test]
    fn density() {
        let mut rows = Vec::new();
        for (p, n) in [("a", 10), ("b", 20), ("c", 90)] {
            for i in 0..n {
                rows.push(row(p, "2000-01-01", Source::Baseline, &i.to_string(), &format!("s{}", i % 3), "L"));
            }
        }
        let d = per_drug_density(&rows);
        assert_eq!(d.pts.median, 20.0);
        assert_eq!(d.pts.mean, 40.0);
        assert_eq!(d.socs.median, 3.0);
        let one = per_drug_density(&rows[..10]);
        assert_eq!((one.pts.median, one.pts.mean), (10.0, 10.0));
        assert_eq!(summarize(&[1.0, 2.0, 3.0, 4.0]).median, 2.5);
        assert_eq!(summarize(&[1.0, 2.0, 3.0, 4.0]).q1, 1.75);
    }

    #[test]
    fn distributions() {
        let rows = [
            row("a", "2000-01-01", Source::Baseline, "1", "", "L"),
            row("a", "2000-01-01", Source::Baseline, "2", "", "L"),
            row("b", "2000-01-01", Source::Baseline, "3", "", "N"),
        ];
        let t = atc_level1_distribution(&rows);
        assert_eq!(t.rows[0].key, "L");
        assert!((t.rows[0].fraction - 2.0 / 3.0).abs() < 1e-15);
        let s = soc_distribution(&rows);
        assert_eq!(s.rows.len(), 1);
        assert_eq!(s.rows[0].key, UNKNOWN);
    }

    #[test]
    fn drug_types() {
        let mut rows = vec![row("a", "2000-01-01", Source::Baseline, "1", "Infections and infestations", "")];
        rows[0].inn = "Somemab".into();
        rows.push(row("b", "2000-01-01", Source::Baseline, "2", "Gastrointestinal disorders", ""));
        rows[1].inn = "smallol".into();
        let bio: BTreeSet<String> = ["somemab".to_string()].into();
        let c = drug_type_comparison(&rows, &bio, 12);
        let inf = c.rows.iter().find(|r| r.soc == "Infections and infestations").unwrap();
        assert_eq!(inf.biologic_pct, 100.0);
        assert_eq!(c.defaulted_inns, 1);
        let none = drug_type_comparison(&rows, &BTreeSet::new(), 12);
        assert_eq!(none.biologic_rows, 0);
    }

    #[test]
    fn new_pts() {
        let rows = [
            row("a", "2005-01-01", Source::Baseline, "1", "", ""),
            row("b", "2010-01-01", Source::PostApproval, "1", "", ""),
            row("b", "2010-01-01", Source::PostApproval, "2", "", ""),
            row("b", "2010-06-01", Source::PostApproval, "3", "", ""),
        ];
        assert_eq!(new_pt_introduction(&rows), [(2005, 1), (2010, 2)]);
        assert!(new_pt_introduction(&[]).is_empty());
    }
}
