//! Brand index parsing, register URL derivation and the join with the agency
//! medicines report.

use std::collections::HashMap;
use std::fmt;
use std::num::NonZeroU32;
use std::path::Path;
use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dates;

pub const REGISTER_BASE_URL: &str = "https://ec.europa.eu/health/documents/community-register/html";

/// Category code of centrally authorised human medicinal products.
pub const HUMAN_CATEGORY: &str = "CH";

static EU_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^EU/1/(\d{2})/(\d{1,4})$").expect("static pattern"));

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("not an EU/1/YY/NNN authorisation number: {0:?}")]
    Parse(String),
    #[error("index header row {row} is missing column {column:?}")]
    MissingColumn { row: usize, column: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("reading {path}: {message}")]
    Format { path: String, message: String },
}

/// Sequential product number from an authorisation number. Never zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HNumber(NonZeroU32);

impl HNumber {
    pub fn new(value: u32) -> Option<Self> {
        NonZeroU32::new(value).map(Self)
    }

    pub fn get(self) -> u32 {
        self.0.get()
    }
}

impl fmt::Display for HNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EuNumber {
    pub year: u8,
    pub sequence: HNumber,
}

/// Parses `EU/1/YY/NNN`. Leading zeros in NNN are discarded; NNN = 0 is
/// rejected.
pub fn parse_eu_number(text: &str) -> Result<EuNumber, IndexError> {
    let trimmed = text.trim();
    let caps = EU_NUMBER
        .captures(trimmed)
        .ok_or_else(|| IndexError::Parse(text.to_string()))?;
    let year: u8 = caps[1].parse().map_err(|_| IndexError::Parse(text.to_string()))?;
    let seq: u32 = caps[2].parse().map_err(|_| IndexError::Parse(text.to_string()))?;
    let sequence = HNumber::new(seq).ok_or_else(|| IndexError::Parse(text.to_string()))?;
    Ok(EuNumber { year, sequence })
}

/// Register product page for an h-number, rendered unpadded (`h1.htm`).
pub fn build_product_url(nnn: HNumber) -> String {
    format!("{REGISTER_BASE_URL}/h{nnn}.htm")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub brand_name: String,
    pub category_code: String,
    pub eu_number: String,
    pub h_number: HNumber,
    pub register_url: String,
}

/// Column names of the brand index, and the physical row holding them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexColumns {
    /// Zero-based physical row of the header. The published workbook puts it
    /// on the third row.
    pub header_row: usize,
    pub brand: String,
    pub category: String,
    pub eu_number: String,
}

impl Default for IndexColumns {
    fn default() -> Self {
        Self {
            header_row: 2,
            brand: "Brand name".into(),
            category: "Category".into(),
            eu_number: "EU number".into(),
        }
    }
}

/// Physical rows of a spreadsheet or delimited export, as text cells.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawTable {
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self, csv::Error> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut rows = Vec::new();
        for record in rdr.records() {
            rows.push(record?.iter().map(str::to_string).collect());
        }
        Ok(Self { rows })
    }

    /// Loads `.xlsx`/`.xls`/`.ods` workbooks (first sheet) or delimited text.
    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        let display = path.display().to_string();
        match ext.as_str() {
            "xlsx" | "xlsm" | "xls" | "ods" => load_workbook(path),
            _ => {
                let file = std::fs::File::open(path).map_err(|source| IndexError::Io {
                    path: display.clone(),
                    source,
                })?;
                Self::from_csv_reader(file).map_err(|e| IndexError::Format {
                    path: display,
                    message: e.to_string(),
                })
            }
        }
    }

    fn column_map(&self, header_row: usize) -> HashMap<String, usize> {
        self.rows
            .get(header_row)
            .map(|header| {
                header
                    .iter()
                    .enumerate()
                    .map(|(i, name)| (name.trim().to_lowercase(), i))
                    .collect()
            })
            .unwrap_or_default()
    }
}

fn load_workbook(path: &Path) -> Result<RawTable, IndexError> {
    use calamine::{open_workbook_auto, Reader};
    let display = path.display().to_string();
    let fmt_err = |message: String| IndexError::Format {
        path: display.clone(),
        message,
    };
    let mut workbook = open_workbook_auto(path).map_err(|e| fmt_err(e.to_string()))?;
    let sheet = workbook
        .sheet_names()
        .first()
        .cloned()
        .ok_or_else(|| fmt_err("workbook has no sheets".into()))?;
    let range = workbook
        .worksheet_range(&sheet)
        .map_err(|e| fmt_err(e.to_string()))?;
    let rows = range
        .rows()
        .map(|row| row.iter().map(|cell| cell.to_string()).collect())
        .collect();
    Ok(RawTable { rows })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRow {
    /// Zero-based physical row in the source table.
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BrandIndex {
    pub entries: Vec<IndexEntry>,
    pub rejected: Vec<RejectedRow>,
}

/// Keeps the centrally authorised human products, in source order. Rows
/// with a malformed authorisation number are rejected with a warning.
pub fn parse_brand_index(table: &RawTable, cols: &IndexColumns) -> Result<BrandIndex, IndexError> {
    if table.rows.len() <= cols.header_row {
        return Ok(BrandIndex::default());
    }
    let columns = table.column_map(cols.header_row);
    let find = |name: &str| {
        columns
            .get(&name.trim().to_lowercase())
            .copied()
            .ok_or_else(|| IndexError::MissingColumn {
                row: cols.header_row,
                column: name.to_string(),
            })
    };
    let brand_col = find(&cols.brand)?;
    let cat_col = find(&cols.category)?;
    let eu_col = find(&cols.eu_number)?;

    let mut out = BrandIndex::default();
    for (i, row) in table.rows.iter().enumerate().skip(cols.header_row + 1) {
        let cell = |c: usize| row.get(c).map(|s| s.trim()).unwrap_or("");
        if cell(cat_col) != HUMAN_CATEGORY {
            continue;
        }
        let eu_text = cell(eu_col);
        match parse_eu_number(eu_text) {
            Ok(eu) => out.entries.push(IndexEntry {
                brand_name: cell(brand_col).to_string(),
                category_code: HUMAN_CATEGORY.to_string(),
                eu_number: eu_text.to_string(),
                h_number: eu.sequence,
                register_url: build_product_url(eu.sequence),
            }),
            Err(e) => {
                tracing::warn!(row = i, "brand index row rejected: {e}");
                out.rejected.push(RejectedRow {
                    row: i,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

/// Renders entries back into index layout (blank rows above the header).
pub fn entries_to_table(entries: &[IndexEntry], cols: &IndexColumns) -> RawTable {
    let mut rows = vec![Vec::new(); cols.header_row];
    rows.push(vec![cols.brand.clone(), cols.category.clone(), cols.eu_number.clone()]);
    rows.extend(entries.iter().map(|e| {
        vec![e.brand_name.clone(), e.category_code.clone(), e.eu_number.clone()]
    }));
    RawTable { rows }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmaReportRow {
    pub brand_name: String,
    pub inn: String,
    pub atc_code: String,
    pub mah: String,
    pub approval_date: Option<NaiveDate>,
    pub therapeutic_area: String,
}

impl EmaReportRow {
    pub fn join_key(&self) -> String {
        join_key(&self.brand_name)
    }
}

pub fn join_key(brand: &str) -> String {
    brand.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportColumns {
    /// Zero-based physical row of the header in the report export.
    pub header_row: usize,
    pub brand: String,
    pub inn: String,
    pub atc: String,
    pub mah: String,
    pub approval_date: String,
    pub therapeutic_area: String,
}

impl Default for ReportColumns {
    fn default() -> Self {
        Self {
            header_row: 0,
            brand: "Name of medicine".into(),
            inn: "International non-proprietary name (INN) / common name".into(),
            atc: "ATC code (human)".into(),
            mah: "Marketing authorisation developer / applicant / holder".into(),
            approval_date: "Marketing authorisation date".into(),
            therapeutic_area: "Therapeutic area (MeSH)".into(),
        }
    }
}

/// Reads the agency report export. Rows with an empty brand are skipped.
pub fn parse_ema_report(table: &RawTable, cols: &ReportColumns) -> Result<Vec<EmaReportRow>, IndexError> {
    if table.rows.len() <= cols.header_row {
        return Ok(Vec::new());
    }
    let columns = table.column_map(cols.header_row);
    let find = |name: &str| {
        columns
            .get(&name.trim().to_lowercase())
            .copied()
            .ok_or_else(|| IndexError::MissingColumn {
                row: cols.header_row,
                column: name.to_string(),
            })
    };
    let idx = [
        find(&cols.brand)?,
        find(&cols.inn)?,
        find(&cols.atc)?,
        find(&cols.mah)?,
        find(&cols.approval_date)?,
        find(&cols.therapeutic_area)?,
    ];
    let mut out = Vec::new();
    for row in table.rows.iter().skip(cols.header_row + 1) {
        let cell = |c: usize| row.get(idx[c]).map(|s| s.trim().to_string()).unwrap_or_default();
        let brand_name = cell(0);
        if brand_name.is_empty() {
            continue;
        }
        out.push(EmaReportRow {
            brand_name,
            inn: cell(1),
            atc_code: cell(2),
            mah: cell(3),
            approval_date: dates::parse_date(&cell(4)),
            therapeutic_area: cell(5),
        });
    }
    Ok(out)
}

/// An index entry with its report enrichment, when one matched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterProduct {
    pub entry: IndexEntry,
    pub report: Option<EmaReportRow>,
}

#[derive(Debug, Clone, Default)]
pub struct JoinOutcome {
    pub products: Vec<RegisterProduct>,
    /// Brands with no report row.
    pub unmatched: Vec<String>,
    /// Report join keys that occurred more than once; the first row won.
    pub duplicate_keys: Vec<String>,
}

/// Case-insensitive brand join. Every entry is kept; duplicate report keys
/// resolve to the first occurrence.
pub fn join_with_ema_report(entries: &[IndexEntry], report: &[EmaReportRow]) -> JoinOutcome {
    let mut by_key: HashMap<String, &EmaReportRow> = HashMap::new();
    let mut outcome = JoinOutcome::default();
    for row in report {
        let key = row.join_key();
        if by_key.contains_key(&key) {
            if !outcome.duplicate_keys.contains(&key) {
                tracing::warn!(brand = %key, "duplicate brand in medicines report, first row used");
                outcome.duplicate_keys.push(key);
            }
            continue;
        }
        by_key.insert(key, row);
    }
    for entry in entries {
        let report = by_key.get(&join_key(&entry.brand_name)).map(|r| (*r).clone());
        if report.is_none() {
            tracing::warn!(brand = %entry.brand_name, "no medicines report row for brand");
            outcome.unmatched.push(entry.brand_name.clone());
        }
        outcome.products.push(RegisterProduct {
            entry: entry.clone(),
            report,
        });
    }
    outcome
}

pub const PRODUCT_COLUMNS: [&str; 9] = [
    "brand",
    "eu_number",
    "h_number",
    "url",
    "inn",
    "atc",
    "mah",
    "approval_date",
    "therapeutic_area",
];

pub fn products_to_rows(products: &[RegisterProduct]) -> Vec<Vec<String>> {
    products
        .iter()
        .map(|p| {
            let r = p.report.as_ref();
            let field = |f: fn(&EmaReportRow) -> String| r.map(f).unwrap_or_default();
            vec![
                p.entry.brand_name.clone(),
                p.entry.eu_number.clone(),
                p.entry.h_number.to_string(),
                p.entry.register_url.clone(),
                field(|r| r.inn.clone()),
                field(|r| r.atc_code.clone()),
                field(|r| r.mah.clone()),
                field(|r| dates::iso_opt(r.approval_date)),
                field(|r| r.therapeutic_area.clone()),
            ]
        })
        .collect()
}

/// Reads back the enriched product list written by the index stage.
pub fn products_from_rows(rows: &[Vec<String>]) -> Result<Vec<RegisterProduct>, IndexError> {
    rows.iter()
        .map(|row| {
            let cell = |i: usize| row.get(i).cloned().unwrap_or_default();
            let eu = parse_eu_number(&cell(1))?;
            let has_report = (4..9).any(|i| !cell(i).is_empty());
            Ok(RegisterProduct {
                entry: IndexEntry {
                    brand_name: cell(0),
                    category_code: HUMAN_CATEGORY.to_string(),
                    eu_number: cell(1),
                    h_number: eu.sequence,
                    register_url: cell(3),
                },
                report: has_report.then(|| EmaReportRow {
                    brand_name: cell(0),
                    inn: cell(4),
                    atc_code: cell(5),
                    mah: cell(6),
                    approval_date: dates::parse_date(&cell(7)),
                    therapeutic_area: cell(8),
                }),
            })
        })
        .collect()
}
