//! The 36-column drug / AE association table: join, ordering and export.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dates::{iso, iso_opt};
use crate::fsutil::{csv_bytes, write_if_changed};
use crate::meddra::MatchMethod;
use crate::register_scraper::ProcedureRecord;
use crate::time_indexer::TimelineEntry;

/// Bumped whenever [`COLUMNS`] changes.
pub const SCHEMA_VERSION: &str = "refset.v1";

macro_rules! association {
    ($($field:ident => $column:literal),* $(,)?) => {
        /// One output row. Field order is column order.
        #[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
        pub struct DrugAeAssociation {
            $(pub $field: String,)*
        }

        pub const COLUMNS: &[&str] = &[$($column),*];

        impl DrugAeAssociation {
            pub fn to_row(&self) -> Vec<String> {
                vec![$(self.$field.clone()),*]
            }

            pub fn from_row(row: &[String]) -> Option<Self> {
                if row.len() != COLUMNS.len() {
                    return None;
                }
                let mut it = row.iter().cloned();
                Some(Self { $($field: it.next()?,)* })
            }
        }
    };
}

association! {
    brand_name => "Brand_Name",
    inn => "inn",
    eu_number => "Union_register_eu_num",
    mah => "Union_register_mah",
    extracted_ae => "LLM_extracted_AE",
    source => "Source",
    reference_date => "Reference Date",
    date_added => "Date Added",
    pt_term => "MedDRA_PT_Term",
    pt_code => "MedDRA_PT_Code",
    hlt_term => "MedDRA_HLT_Term",
    hlt_code => "MedDRA_HLT_Code",
    hlgt_term => "MedDRA_HLGT_Term",
    hlgt_code => "MedDRA_HLGT_Code",
    soc_term => "MedDRA_SOC_Term",
    soc_code => "MedDRA_SOC_Code",
    match_method => "MedDRA_Match_Method",
    atc1_code => "ATC_Level_1_Code",
    atc1_desc => "ATC_Level_1_Desc",
    atc2_code => "ATC_Level_2_Code",
    atc2_desc => "ATC_Level_2_Desc",
    atc3_code => "ATC_Level_3_Code",
    atc3_desc => "ATC_Level_3_Desc",
    atc4_code => "ATC_Level_4_Code",
    atc4_desc => "ATC_Level_4_Desc",
    atc5_code => "ATC_Level_5_Code",
    atc5_desc => "ATC_Level_5_Desc",
    close_date => "Union_register_close_date",
    procedure => "Union_register_procedure",
    ema_number => "Union_register_Ema_number",
    decision_number => "Union_register_decisio_number",
    decision_date => "Union_register_decision_date",
    link => "Union_register_link",
    indication => "Union_register_indication",
    atc_raw => "Union_register_atc",
    source_file => "Source_File",
}

pub fn rows_from_table(rows: &[Vec<String>]) -> Result<Vec<DrugAeAssociation>, String> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            DrugAeAssociation::from_row(r).ok_or_else(|| format!("row {}: expected {} fields, got {}", i + 1, COLUMNS.len(), r.len()))
        })
        .collect()
}

static ATC_CODE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[A-Z][0-9]{2}[A-Z][A-Z][0-9]{2}$").unwrap());
static ATC_IN_TEXT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b[A-Z][0-9]{2}[A-Z][A-Z][0-9]{2}\b").unwrap());

/// Prefix lengths of the five ATC levels.
pub const ATC_LEVEL_LENGTHS: [usize; 5] = [1, 3, 4, 5, 7];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed ATC code {0:?}")]
pub struct AtcError(pub String);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AtcReference(pub BTreeMap<String, String>);

impl AtcReference {
    /// Rows of (code, description); a header row is skipped by the caller.
    pub fn from_rows(rows: &[Vec<String>]) -> Self {
        Self(
            rows.iter()
                .filter_map(|r| Some((r.first()?.trim().to_uppercase(), r.get(1)?.trim().to_string())))
                .filter(|(c, _)| !c.is_empty())
                .collect(),
        )
    }

    pub fn describe(&self, code: &str) -> String {
        self.0.get(code).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AtcLevel {
    pub code: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AtcClassification {
    pub levels: [AtcLevel; 5],
}

pub fn expand_atc(code: &str, reference: &AtcReference) -> Result<AtcClassification, AtcError> {
    let code = code.trim().to_uppercase();
    if !ATC_CODE.is_match(&code) {
        return Err(AtcError(code));
    }
    Ok(AtcClassification {
        levels: ATC_LEVEL_LENGTHS.map(|n| {
            let prefix = &code[..n];
            AtcLevel {
                code: prefix.to_string(),
                description: reference.describe(prefix),
            }
        }),
    })
}

/// First well-formed level-5 code in free text such as "A10BA02, A10BD07".
pub fn first_atc_code(text: &str) -> Option<String> {
    ATC_IN_TEXT.find(&text.to_uppercase()).map(|m| m.as_str().to_string())
}

/// Per-product values the join needs.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product_id: String,
    pub brand_name: String,
    pub inn: String,
    pub eu_number: String,
    pub mah: String,
    pub indication: String,
    pub atc_raw: String,
    /// Level-5 code used for the ATC block.
    pub atc_code: String,
    pub status: String,
}

/// Which products count as active in the processed dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveFilter {
    /// Status substrings (case-insensitive) that mark a product inactive.
    pub inactive_statuses: Vec<String>,
    pub force_inactive: Vec<String>,
    pub force_active: Vec<String>,
}

impl Default for ActiveFilter {
    fn default() -> Self {
        Self {
            inactive_statuses: ["withdrawn", "suspended", "revoked", "not renewed", "lapsed", "expired", "refused"]
                .map(String::from)
                .to_vec(),
            force_inactive: Vec::new(),
            force_active: Vec::new(),
        }
    }
}

impl ActiveFilter {
    pub fn is_active(&self, p: &ProductRecord) -> bool {
        let listed = |list: &[String]| list.iter().any(|id| id.trim() == p.product_id || id.trim() == p.eu_number);
        if listed(&self.force_active) {
            return true;
        }
        if listed(&self.force_inactive) {
            return false;
        }
        let status = p.status.to_lowercase();
        !self.inactive_statuses.iter().any(|s| status.contains(&s.to_lowercase()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    /// Every product with a timeline.
    Raw,
    /// Active products only.
    #[default]
    Processed,
}

pub struct AssemblyInput<'a> {
    pub products: &'a [ProductRecord],
    pub timeline: &'a [TimelineEntry],
    pub procedures: &'a BTreeMap<String, Vec<ProcedureRecord>>,
    pub atc: &'a AtcReference,
    pub mode: DatasetMode,
    pub filter: &'a ActiveFilter,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assembled {
    pub rows: Vec<DrugAeAssociation>,
    /// Timeline entries with no product metadata.
    pub skipped: Vec<String>,
    /// Products left out by the active filter, with their row counts.
    pub excluded_inactive: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

pub fn assemble(input: &AssemblyInput<'_>) -> Assembled {
    let products: HashMap<&str, &ProductRecord> = input.products.iter().map(|p| (p.product_id.as_str(), p)).collect();
    let mut out = Assembled::default();
    let mut atc_cache: HashMap<&str, Option<AtcClassification>> = HashMap::new();
    for entry in input.timeline {
        let Some(product) = products.get(entry.product_id.as_str()) else {
            let msg = format!("{}: timeline entry {:?} has no product metadata", entry.product_id, entry.term.raw);
            tracing::error!("{msg}");
            out.skipped.push(msg);
            continue;
        };
        if input.mode == DatasetMode::Processed && !input.filter.is_active(product) {
            *out.excluded_inactive.entry(product.product_id.clone()).or_default() += 1;
            continue;
        }
        let atc = atc_cache
            .entry(product.product_id.as_str())
            .or_insert_with(|| match expand_atc(&product.atc_code, input.atc) {
                Ok(a) => Some(a),
                Err(e) => {
                    let msg = format!("{}: {e}", product.product_id);
                    tracing::warn!("{msg}");
                    out.warnings.push(msg);
                    None
                }
            })
            .clone()
            .unwrap_or_default();
        let procedure = input
            .procedures
            .get(&entry.product_id)
            .and_then(|ps| ps.iter().find(|p| p.procedure_id == entry.procedure_id));
        out.rows.push(row_for(product, entry, &atc, procedure));
    }
    out.rows.sort_by(|a, b| {
        (&a.eu_number, &a.date_added, &a.pt_term, &a.extracted_ae).cmp(&(&b.eu_number, &b.date_added, &b.pt_term, &b.extracted_ae))
    });
    out
}

fn row_for(
    product: &ProductRecord,
    entry: &TimelineEntry,
    atc: &AtcClassification,
    procedure: Option<&ProcedureRecord>,
) -> DrugAeAssociation {
    let level = |i: usize| (atc.levels[i].code.clone(), atc.levels[i].description.clone());
    let (atc1_code, atc1_desc) = level(0);
    let (atc2_code, atc2_desc) = level(1);
    let (atc3_code, atc3_desc) = level(2);
    let (atc4_code, atc4_desc) = level(3);
    let (atc5_code, atc5_desc) = level(4);
    let path = entry.term.path.as_ref();
    let name = |f: fn(&crate::meddra::HierarchyPath) -> &crate::meddra::Level| path.map(|p| f(p).name.clone()).unwrap_or_default();
    let code = |f: fn(&crate::meddra::HierarchyPath) -> &crate::meddra::Level| path.map(|p| f(p).code.to_string()).unwrap_or_default();
    let method = if path.is_none() && entry.term.method.is_success() {
        MatchMethod::Unmatched
    } else {
        entry.term.method
    };
    DrugAeAssociation {
        brand_name: product.brand_name.clone(),
        inn: product.inn.clone(),
        eu_number: product.eu_number.clone(),
        mah: product.mah.clone(),
        extracted_ae: entry.term.raw.clone(),
        source: entry.source.label().to_string(),
        reference_date: iso_opt(entry.reference_date),
        date_added: iso(entry.date_added),
        pt_term: name(|p| &p.pt),
        pt_code: code(|p| &p.pt),
        hlt_term: name(|p| &p.hlt),
        hlt_code: code(|p| &p.hlt),
        hlgt_term: name(|p| &p.hlgt),
        hlgt_code: code(|p| &p.hlgt),
        soc_term: name(|p| &p.soc),
        soc_code: code(|p| &p.soc),
        match_method: method.label().to_string(),
        atc1_code,
        atc1_desc,
        atc2_code,
        atc2_desc,
        atc3_code,
        atc3_desc,
        atc4_code,
        atc4_desc,
        atc5_code,
        atc5_desc,
        close_date: procedure.map(|p| iso_opt(p.close_date)).unwrap_or_default(),
        procedure: procedure.map(|p| p.procedure_type.clone()).unwrap_or_default(),
        ema_number: procedure.map(|p| p.ema_number.clone()).unwrap_or_default(),
        decision_number: procedure.map(|p| p.decision_number.clone()).unwrap_or_default(),
        decision_date: procedure.map(|p| iso_opt(p.decision_date)).unwrap_or_default(),
        link: procedure.map(|p| p.document_link.clone()).unwrap_or_default(),
        indication: product.indication.clone(),
        atc_raw: product.atc_raw.clone(),
        source_file: entry.source_file.clone(),
    }
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("building workbook: {0}")]
    Workbook(#[from] rust_xlsxwriter::XlsxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Xlsx,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExportOutcome {
    pub paths: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

pub fn dataset_file_stem(run_stamp: &str) -> String {
    format!("refset_dataset_{run_stamp}")
}

pub fn csv_export_bytes(rows: &[DrugAeAssociation]) -> Vec<u8> {
    let table: Vec<Vec<String>> = rows.iter().map(DrugAeAssociation::to_row).collect();
    csv_bytes(COLUMNS, &table)
}

/// Workbook with the same content as the CSV. Document timestamps are
/// pinned so the bytes depend only on the rows.
pub fn xlsx_export_bytes(rows: &[DrugAeAssociation]) -> Result<Vec<u8>, ExportError> {
    use rust_xlsxwriter::{DocProperties, ExcelDateTime, Workbook};
    let mut wb = Workbook::new();
    let pinned = ExcelDateTime::from_ymd(2000, 1, 1)?;
    wb.set_properties(&DocProperties::new().set_creation_datetime(&pinned));
    let ws = wb.add_worksheet();
    ws.set_name("dataset")?;
    for (c, name) in COLUMNS.iter().enumerate() {
        ws.write_string(0, c as u16, *name)?;
    }
    for (r, row) in rows.iter().enumerate() {
        for (c, value) in row.to_row().iter().enumerate() {
            if !value.is_empty() {
                ws.write_string(r as u32 + 1, c as u16, value)?;
            }
        }
    }
    ws.set_freeze_panes(1, 0)?;
    Ok(wb.save_to_buffer()?)
}

pub fn export(rows: &[DrugAeAssociation], out_dir: &Path, run_stamp: &str, formats: &[ExportFormat]) -> Result<ExportOutcome, ExportError> {
    let mut out = ExportOutcome::default();
    if rows.is_empty() {
        let msg = "dataset has no rows; writing header only".to_string();
        tracing::warn!("{msg}");
        out.warnings.push(msg);
    }
    let stem = dataset_file_stem(run_stamp);
    for format in formats {
        let (path, bytes) = match format {
            ExportFormat::Csv => (out_dir.join(format!("{stem}.csv")), csv_export_bytes(rows)),
            ExportFormat::Xlsx => (out_dir.join(format!("{stem}.xlsx")), xlsx_export_bytes(rows)?),
        };
        write_if_changed(&path, &bytes).map_err(|source| ExportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        out.paths.push(path);
    }
    Ok(out)
}

/// Counts written next to the dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyReport {
    pub schema_version: String,
    pub mode: DatasetMode,
    pub rows: usize,
    pub products: usize,
    pub per_match_method: BTreeMap<String, usize>,
    pub per_source: BTreeMap<String, usize>,
    pub skipped_rows: usize,
    pub excluded_inactive: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

pub fn report(assembled: &Assembled, mode: DatasetMode) -> AssemblyReport {
    let mut per_match_method: BTreeMap<String, usize> = MatchMethod::ALL.iter().map(|m| (m.label().to_string(), 0)).collect();
    let mut per_source = BTreeMap::new();
    for r in &assembled.rows {
        *per_match_method.entry(r.match_method.clone()).or_default() += 1;
        *per_source.entry(r.source.clone()).or_default() += 1;
    }
    let mut products: Vec<&str> = assembled.rows.iter().map(|r| r.eu_number.as_str()).collect();
    products.dedup();
    AssemblyReport {
        schema_version: SCHEMA_VERSION.into(),
        mode,
        rows: assembled.rows.len(),
        products: products.len(),
        per_match_method,
        per_source,
        skipped_rows: assembled.skipped.len(),
        excluded_inactive: assembled.excluded_inactive.clone(),
        warnings: assembled.warnings.iter().chain(&assembled.skipped).cloned().collect(),
    }
}
