//! Four-level terminology hierarchy (PT → HLT → HLGT → SOC) loaded from
//! `$`-delimited ASCII distribution files, and the two-pass term mapper.
//!
//! File layout, one record per line, fields separated by [`FIELD_DELIMITER`]
//! (a trailing delimiter is allowed):
//!
//! | file           | fields                                   |
//! |----------------|------------------------------------------|
//! | `soc.asc`      | soc_code, soc_name, ...                  |
//! | `hlgt.asc`     | hlgt_code, hlgt_name, ...                |
//! | `hlt.asc`      | hlt_code, hlt_name, ...                  |
//! | `pt.asc`       | pt_code, pt_name, _, primary_soc_code?   |
//! | `soc_hlgt.asc` | soc_code, hlgt_code, primary_flag?       |
//! | `hlgt_hlt.asc` | hlgt_code, hlt_code, primary_flag?       |
//! | `hlt_pt.asc`   | hlt_code, pt_code, primary_flag?         |
//!
//! Linkage rows map a child to its parent. A child listed under several
//! parents is multi-axial; [`AxialityPolicy`] decides which single parent is
//! kept. `meddra_release.asc`, when present, supplies the dictionary version.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{render, GatewayConfig, GatewayError, GatewayRequest, Task, TextGateway};

pub const FIELD_DELIMITER: char = '$';

pub const PREDICT_SOCS_PROMPT: &str = include_str!("../assets/prompts/predict_socs.v1.txt");
pub const SELECT_PT_PROMPT: &str = include_str!("../assets/prompts/select_pt.v1.txt");

/// Most SOCs kept from one prediction.
pub const MAX_PREDICTED_SOCS: usize = 3;
/// Tokens held back from the context window for the reply.
const REPLY_RESERVE_TOKENS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Code(pub u32);

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for Code {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(Code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AxialityPolicy {
    /// The last linkage row for a child wins, as with an overwrite map.
    #[default]
    LastLoaded,
    /// The row flagged primary wins regardless of order. PTs without a flag
    /// fall back to the primary SOC column of `pt.asc`, then to last-loaded.
    PrimaryFlag,
}

impl fmt::Display for AxialityPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LastLoaded => "LastLoaded",
            Self::PrimaryFlag => "PrimaryFlag",
        })
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("missing dictionary file {0}")]
    MissingFile(String),
    #[error("dictionary file {0} has no usable rows")]
    EmptyFile(String),
    #[error("reading {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("PT {0} is not in the dictionary")]
    UnknownPt(Code),
    #[error("PT {0} has no HLT link")]
    MissingHltLink(Code),
    #[error("HLT {0} has no HLGT link")]
    MissingHlgtLink(Code),
    #[error("HLGT {0} has no SOC link")]
    MissingSocLink(Code),
    #[error("{level} {code} has no name entry")]
    MissingName { level: &'static str, code: Code },
}

/// Raw contents of the distribution files.
#[derive(Debug, Clone, Default)]
pub struct AscFiles {
    pub soc: String,
    pub hlgt: String,
    pub hlt: String,
    pub pt: String,
    pub soc_hlgt: String,
    pub hlgt_hlt: String,
    pub hlt_pt: String,
    pub release: Option<String>,
}

impl AscFiles {
    pub const NAMES: [&'static str; 7] = [
        "soc.asc",
        "hlgt.asc",
        "hlt.asc",
        "pt.asc",
        "soc_hlgt.asc",
        "hlgt_hlt.asc",
        "hlt_pt.asc",
    ];

    pub fn read_dir(dir: &Path) -> Result<Self, LoadError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| {
                if source.kind() == std::io::ErrorKind::NotFound {
                    LoadError::MissingFile(path.display().to_string())
                } else {
                    LoadError::Io {
                        file: path.display().to_string(),
                        source,
                    }
                }
            })
        };
        Ok(Self {
            soc: read("soc.asc")?,
            hlgt: read("hlgt.asc")?,
            hlt: read("hlt.asc")?,
            pt: read("pt.asc")?,
            soc_hlgt: read("soc_hlgt.asc")?,
            hlgt_hlt: read("hlgt_hlt.asc")?,
            hlt_pt: read("hlt_pt.asc")?,
            release: std::fs::read_to_string(dir.join("meddra_release.asc")).ok(),
        })
    }
}

fn fields(line: &str) -> Vec<&str> {
    let line = line.trim_end_matches(['\r', '\n']);
    let line = line.strip_suffix(FIELD_DELIMITER).unwrap_or(line);
    line.split(FIELD_DELIMITER).map(str::trim).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkRow {
    pub parent: Code,
    pub child: Code,
    pub primary: bool,
}

/// Parses a linkage file into rows, in file order. Malformed rows are
/// skipped and reported by line number.
/// First field of the first line of `meddra_release.asc`.
pub fn release_version(text: &str) -> Option<String> {
    let line = text.lines().next()?;
    fields(line).first().map(|s| s.to_string()).filter(|v| !v.is_empty())
}

pub fn parse_links(text: &str, file: &str, warnings: &mut Vec<String>) -> Vec<LinkRow> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = fields(line);
        let parsed = match f.as_slice() {
            [p, c, rest @ ..] => p.parse::<Code>().ok().zip(c.parse::<Code>().ok()).map(|(parent, child)| LinkRow {
                parent,
                child,
                primary: rest.first().is_some_and(|flag| flag.eq_ignore_ascii_case("y")),
            }),
            _ => None,
        };
        match parsed {
            Some(row) => rows.push(row),
            None => warnings.push(format!("{file}:{}: malformed linkage row skipped", i + 1)),
        }
    }
    rows
}

struct NameRow {
    code: Code,
    name: String,
    primary_soc: Option<Code>,
}

fn parse_names(text: &str, file: &str, warnings: &mut Vec<String>) -> Vec<NameRow> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = fields(line);
        match (f.first().and_then(|c| c.parse::<Code>().ok()), f.get(1)) {
            (Some(code), Some(name)) if !name.is_empty() => rows.push(NameRow {
                code,
                name: name.to_string(),
                primary_soc: f.get(3).and_then(|c| c.parse().ok()),
            }),
            _ => warnings.push(format!("{file}:{}: malformed row skipped", i + 1)),
        }
    }
    rows
}

/// Collapses linkage rows to one parent per child under `policy`.
/// `preferred` can pick a parent for children that have no flagged row.
pub fn resolve_links(
    rows: &[LinkRow],
    policy: AxialityPolicy,
    preferred: impl Fn(Code, &[Code]) -> Option<Code>,
) -> BTreeMap<Code, Code> {
    let mut last = BTreeMap::new();
    for row in rows {
        last.insert(row.child, row.parent);
    }
    if policy == AxialityPolicy::LastLoaded {
        return last;
    }
    let mut parents: BTreeMap<Code, Vec<Code>> = BTreeMap::new();
    let mut flagged: BTreeMap<Code, Code> = BTreeMap::new();
    for row in rows {
        parents.entry(row.child).or_default().push(row.parent);
        if row.primary {
            flagged.entry(row.child).or_insert(row.parent);
        }
    }
    last.into_iter()
        .map(|(child, fallback)| {
            let parent = flagged
                .get(&child)
                .copied()
                .or_else(|| preferred(child, &parents[&child]))
                .unwrap_or(fallback);
            (child, parent)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub code: Code,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyPath {
    pub pt: Level,
    pub hlt: Level,
    pub hlgt: Level,
    pub soc: Level,
}

/// In-memory dictionary. Immutable after load.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub version: String,
    pub policy: AxialityPolicy,
    pt_by_name: HashMap<String, Code>,
    pt_names: BTreeMap<Code, String>,
    hlt: BTreeMap<Code, String>,
    hlgt: BTreeMap<Code, String>,
    soc: BTreeMap<Code, String>,
    soc_list: Vec<Code>,
    pt_hlt: BTreeMap<Code, Code>,
    hlt_hlgt: BTreeMap<Code, Code>,
    hlgt_soc: BTreeMap<Code, Code>,
    reverse_index: BTreeMap<Code, BTreeSet<Code>>,
    pub load_warnings: Vec<String>,
}

/// Loads the dictionary files in `dir`.
pub fn load_hierarchy(dir: &Path, policy: AxialityPolicy) -> Result<Hierarchy, LoadError> {
    Hierarchy::from_files(&AscFiles::read_dir(dir)?, policy)
}

impl Hierarchy {
    pub fn from_files(files: &AscFiles, policy: AxialityPolicy) -> Result<Self, LoadError> {
        let mut warnings = Vec::new();
        let nonempty = |rows_len: usize, name: &str| {
            if rows_len == 0 {
                Err(LoadError::EmptyFile(name.to_string()))
            } else {
                Ok(())
            }
        };
        let socs = parse_names(&files.soc, "soc.asc", &mut warnings);
        nonempty(socs.len(), "soc.asc")?;
        let hlgts = parse_names(&files.hlgt, "hlgt.asc", &mut warnings);
        nonempty(hlgts.len(), "hlgt.asc")?;
        let hlts = parse_names(&files.hlt, "hlt.asc", &mut warnings);
        nonempty(hlts.len(), "hlt.asc")?;
        let pts = parse_names(&files.pt, "pt.asc", &mut warnings);
        nonempty(pts.len(), "pt.asc")?;
        let soc_hlgt = parse_links(&files.soc_hlgt, "soc_hlgt.asc", &mut warnings);
        nonempty(soc_hlgt.len(), "soc_hlgt.asc")?;
        let hlgt_hlt = parse_links(&files.hlgt_hlt, "hlgt_hlt.asc", &mut warnings);
        nonempty(hlgt_hlt.len(), "hlgt_hlt.asc")?;
        let hlt_pt = parse_links(&files.hlt_pt, "hlt_pt.asc", &mut warnings);
        nonempty(hlt_pt.len(), "hlt_pt.asc")?;

        let mut soc_list = Vec::new();
        let mut soc = BTreeMap::new();
        for row in socs {
            if soc.insert(row.code, row.name).is_none() {
                soc_list.push(row.code);
            }
        }
        let names = |rows: Vec<NameRow>| rows.into_iter().map(|r| (r.code, r.name)).collect::<BTreeMap<_, _>>();
        let hlgt = names(hlgts);
        let hlt = names(hlts);
        let primary_soc: HashMap<Code, Code> = pts.iter().filter_map(|r| Some((r.code, r.primary_soc?))).collect();
        let mut pt_by_name = HashMap::new();
        let mut pt_names = BTreeMap::new();
        for row in pts {
            pt_by_name.insert(normalize(&row.name), row.code);
            pt_names.insert(row.code, row.name);
        }

        let hlgt_soc = resolve_links(&soc_hlgt, policy, |_, _| None);
        let hlt_hlgt = resolve_links(&hlgt_hlt, policy, |_, _| None);
        let soc_of_hlt = |h: Code| hlt_hlgt.get(&h).and_then(|g| hlgt_soc.get(g)).copied();
        let pt_hlt = resolve_links(&hlt_pt, policy, |pt, candidates| {
            let want = primary_soc.get(&pt)?;
            candidates.iter().copied().find(|h| soc_of_hlt(*h) == Some(*want))
        });

        let mut h = Self {
            version: files
                .release
                .as_deref()
                .and_then(release_version)
                .unwrap_or_else(|| "unknown".into()),
            policy,
            pt_by_name,
            pt_names,
            hlt,
            hlgt,
            soc,
            soc_list,
            pt_hlt,
            hlt_hlgt,
            hlgt_soc,
            reverse_index: BTreeMap::new(),
            load_warnings: Vec::new(),
        };
        let mut reverse: BTreeMap<Code, BTreeSet<Code>> = BTreeMap::new();
        for pt in h.pt_hlt.keys().copied().collect::<Vec<_>>() {
            match h.resolve(pt) {
                Ok(path) if h.soc.contains_key(&path.soc.code) => {
                    reverse.entry(path.soc.code).or_default().insert(pt);
                }
                Ok(path) => warnings.push(format!("PT {pt} resolves to unknown SOC {}", path.soc.code)),
                Err(e) => warnings.push(format!("broken chain: {e}")),
            }
        }
        h.reverse_index = reverse;
        for w in &warnings {
            tracing::warn!("{w}");
        }
        h.load_warnings = warnings;
        Ok(h)
    }

    pub fn soc_list(&self) -> &[Code] {
        &self.soc_list
    }

    pub fn soc_name(&self, code: Code) -> Option<&str> {
        self.soc.get(&code).map(String::as_str)
    }

    pub fn pt_name(&self, code: Code) -> Option<&str> {
        self.pt_names.get(&code).map(String::as_str)
    }

    pub fn pt_count(&self) -> usize {
        self.pt_names.len()
    }

    pub fn pt_by_name(&self, name: &str) -> Option<Code> {
        self.pt_by_name.get(&normalize(name)).copied()
    }

    pub fn contains_pt(&self, code: Code) -> bool {
        self.pt_names.contains_key(&code)
    }

    pub fn pts_in_soc(&self, soc: Code) -> impl Iterator<Item = Code> + '_ {
        self.reverse_index.get(&soc).into_iter().flatten().copied()
    }

    pub fn pt_parent(&self, pt: Code) -> Option<Code> {
        self.pt_hlt.get(&pt).copied()
    }

    /// Follows the single resolved path PT → HLT → HLGT → SOC.
    pub fn resolve(&self, pt: Code) -> Result<HierarchyPath, HierarchyError> {
        let pt_name = self.pt_names.get(&pt).ok_or(HierarchyError::UnknownPt(pt))?;
        let hlt = *self.pt_hlt.get(&pt).ok_or(HierarchyError::MissingHltLink(pt))?;
        let hlgt = *self.hlt_hlgt.get(&hlt).ok_or(HierarchyError::MissingHlgtLink(hlt))?;
        let soc = *self.hlgt_soc.get(&hlgt).ok_or(HierarchyError::MissingSocLink(hlgt))?;
        let name = |map: &BTreeMap<Code, String>, level: &'static str, code: Code| {
            map.get(&code)
                .cloned()
                .map(|name| Level { code, name })
                .ok_or(HierarchyError::MissingName { level, code })
        };
        Ok(HierarchyPath {
            pt: Level {
                code: pt,
                name: pt_name.clone(),
            },
            hlt: name(&self.hlt, "HLT", hlt)?,
            hlgt: name(&self.hlgt, "HLGT", hlgt)?,
            soc: name(&self.soc, "SOC", soc)?,
        })
    }
}

fn normalize(term: &str) -> String {
    term.trim().to_lowercase()
}

/// Pass one: case-insensitive exact match on PT names.
pub fn match_exact(term: &str, h: &Hierarchy) -> Option<Code> {
    let key = normalize(term);
    if key.is_empty() {
        return None;
    }
    h.pt_by_name.get(&key).copied()
}

pub fn resolve_hierarchy(pt: Code, h: &Hierarchy) -> Result<HierarchyPath, HierarchyError> {
    h.resolve(pt)
}

/// Asks the gateway for up to three SOCs. Answers not in the loaded SOC
/// list are dropped; the caller only uses the result to narrow the search.
pub fn try_predict_socs<G: TextGateway + ?Sized>(
    term: &str,
    gateway: &G,
    h: &Hierarchy,
    cfg: &GatewayConfig,
) -> Result<Vec<Code>, GatewayError> {
    let soc_names: Vec<&str> = h.soc_list.iter().filter_map(|c| h.soc_name(*c)).collect();
    let request = GatewayRequest {
        task: Task::PredictSocs,
        subject: term.to_string(),
        user_prompt: render(PREDICT_SOCS_PROMPT, &[("socs", &soc_names.join("\n")), ("term", term)]),
    };
    let reply = gateway.complete(&request, cfg)?;
    Ok(parse_soc_reply(&reply, h))
}

/// Same as [`try_predict_socs`], but a gateway failure gives an empty
/// prediction.
pub fn predict_socs<G: TextGateway + ?Sized>(term: &str, gateway: &G, h: &Hierarchy, cfg: &GatewayConfig) -> Vec<Code> {
    try_predict_socs(term, gateway, h, cfg).unwrap_or_else(|e| {
        tracing::warn!(term, "SOC prediction failed: {e}");
        Vec::new()
    })
}

fn clean_answer(line: &str) -> &str {
    line.trim()
        .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*' | '\u{2022}'))
        .trim()
        .trim_matches(|c| c == '"' || c == '\'' || c == '`')
        .trim_end_matches('.')
        .trim()
}

fn parse_soc_reply(reply: &str, h: &Hierarchy) -> Vec<Code> {
    let by_name: HashMap<String, Code> = h.soc.iter().map(|(c, n)| (normalize(n), *c)).collect();
    let lookup = |s: &str| {
        let s = clean_answer(s);
        by_name
            .get(&normalize(s))
            .copied()
            .or_else(|| s.parse::<Code>().ok().filter(|c| h.soc.contains_key(c)))
    };
    let mut out: Vec<Code> = Vec::new();
    for line in reply.lines().filter(|l| !l.trim().is_empty()) {
        let hits: Vec<Code> = match lookup(line) {
            Some(code) => vec![code],
            // Several names on one line; SOC names themselves may contain
            // commas, so this is only tried when the whole line fails.
            None => line.split([';', ',']).filter_map(lookup).collect(),
        };
        for code in hits {
            if !out.contains(&code) {
                out.push(code);
            }
        }
    }
    out.truncate(MAX_PREDICTED_SOCS);
    out
}

fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Splits sorted candidate names into prompt-sized batches.
pub fn batch_candidates(names: &[String], term: &str, max_context: usize) -> Vec<Vec<String>> {
    let base = estimate_tokens(SELECT_PT_PROMPT) + estimate_tokens(term) + 64;
    let budget = max_context.saturating_sub(REPLY_RESERVE_TOKENS + base).max(1);
    let mut batches: Vec<Vec<String>> = Vec::new();
    let mut used = 0;
    for name in names {
        let cost = estimate_tokens(name) + 1;
        if batches.is_empty() || (used + cost > budget && !batches.last().unwrap().is_empty()) {
            batches.push(Vec::new());
            used = 0;
        }
        batches.last_mut().unwrap().push(name.clone());
        used += cost;
    }
    batches
}

fn select_from<G: TextGateway + ?Sized>(
    term: &str,
    names: &[String],
    pool: &BTreeSet<Code>,
    gateway: &G,
    h: &Hierarchy,
    cfg: &GatewayConfig,
) -> Result<Option<Code>, GatewayError> {
    let request = GatewayRequest {
        task: Task::SelectPt,
        subject: term.to_string(),
        user_prompt: render(SELECT_PT_PROMPT, &[("candidates", &names.join("\n")), ("term", term)]),
    };
    let reply = gateway.complete(&request, cfg)?;
    let answer = reply.lines().map(clean_answer).find(|l| !l.is_empty()).unwrap_or("");
    if answer.is_empty() || answer.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    Ok(h.pt_by_name(answer).filter(|code| pool.contains(code)))
}

/// Pass two: the gateway picks one PT from the PTs of the predicted SOCs.
/// The pick is validated against the PT name dictionary and the pool.
pub fn try_match_soc_filtered<G: TextGateway + ?Sized>(
    term: &str,
    socs: &[Code],
    gateway: &G,
    h: &Hierarchy,
    cfg: &GatewayConfig,
) -> Result<Option<Code>, GatewayError> {
    let pool: BTreeSet<Code> = socs.iter().flat_map(|s| h.pts_in_soc(*s)).collect();
    if pool.is_empty() {
        return Ok(None);
    }
    let mut names: Vec<String> = pool.iter().filter_map(|c| h.pt_name(*c).map(str::to_string)).collect();
    names.sort_by(|a, b| a.to_lowercase().cmp(&b.to_lowercase()).then_with(|| a.cmp(b)));
    let batches = batch_candidates(&names, term, cfg.max_context);
    let mut picks = Vec::new();
    for batch in &batches {
        if let Some(code) = select_from(term, batch, &pool, gateway, h, cfg)? {
            if !picks.contains(&code) {
                picks.push(code);
            }
        }
    }
    match picks.len() {
        0 => Ok(None),
        1 => Ok(picks.pop()),
        _ => {
            let finalists: Vec<String> = picks.iter().filter_map(|c| h.pt_name(*c).map(str::to_string)).collect();
            let finalist_pool = picks.iter().copied().collect();
            select_from(term, &finalists, &finalist_pool, gateway, h, cfg)
        }
    }
}

pub fn match_soc_filtered<G: TextGateway + ?Sized>(
    term: &str,
    socs: &[Code],
    gateway: &G,
    h: &Hierarchy,
    cfg: &GatewayConfig,
) -> Option<Code> {
    try_match_soc_filtered(term, socs, gateway, h, cfg).unwrap_or_else(|e| {
        tracing::warn!(term, "SOC-filtered match failed: {e}");
        None
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchMethod {
    ExactMatch,
    SocFilteredMatch,
    Manual,
    Unmatched,
    Error,
}

impl MatchMethod {
    pub const ALL: [MatchMethod; 5] = [
        Self::ExactMatch,
        Self::SocFilteredMatch,
        Self::Manual,
        Self::Unmatched,
        Self::Error,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::ExactMatch => "Exact Match",
            Self::SocFilteredMatch => "SOC-Filtered Match",
            Self::Manual => "Manual",
            Self::Unmatched => "Unmatched",
            Self::Error => "Error",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label().eq_ignore_ascii_case(label.trim()))
    }

    pub fn is_success(self) -> bool {
        matches!(self, Self::ExactMatch | Self::SocFilteredMatch | Self::Manual)
    }
}

impl fmt::Display for MatchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A raw term and where it landed. `path` is present exactly when the
/// method is a success.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappedTerm {
    pub raw: String,
    pub path: Option<HierarchyPath>,
    pub method: MatchMethod,
    pub note: String,
}

impl MappedTerm {
    pub fn failed(raw: &str, method: MatchMethod, note: impl Into<String>) -> Self {
        Self {
            raw: raw.to_string(),
            path: None,
            method,
            note: note.into(),
        }
    }
}

/// Two-pass mapping. Never fails: problems become `Unmatched` or `Error`
/// rows.
pub fn map_term<G: TextGateway + ?Sized>(term: &str, h: &Hierarchy, gateway: &G, cfg: &GatewayConfig) -> MappedTerm {
    let resolved = |code: Code, method: MatchMethod| match h.resolve(code) {
        Ok(path) => MappedTerm {
            raw: term.to_string(),
            path: Some(path),
            method,
            note: String::new(),
        },
        Err(e) => MappedTerm::failed(term, MatchMethod::Error, e.to_string()),
    };
    if let Some(code) = match_exact(term, h) {
        return resolved(code, MatchMethod::ExactMatch);
    }
    let socs = match try_predict_socs(term, gateway, h, cfg) {
        Ok(s) => s,
        Err(e) => return MappedTerm::failed(term, MatchMethod::Error, e.to_string()),
    };
    if socs.is_empty() {
        return MappedTerm::failed(term, MatchMethod::Unmatched, "no SOC predicted");
    }
    match try_match_soc_filtered(term, &socs, gateway, h, cfg) {
        Ok(Some(code)) => resolved(code, MatchMethod::SocFilteredMatch),
        Ok(None) => MappedTerm::failed(term, MatchMethod::Unmatched, "no candidate selected"),
        Err(e) => MappedTerm::failed(term, MatchMethod::Error, e.to_string()),
    }
}

pub const MAPPING_COLUMNS: [&str; 11] = [
    "raw_term",
    "pt_term",
    "pt_code",
    "hlt_term",
    "hlt_code",
    "hlgt_term",
    "hlgt_code",
    "soc_term",
    "soc_code",
    "match_method",
    "note",
];

pub fn mapping_to_rows(terms: &[MappedTerm]) -> Vec<Vec<String>> {
    terms
        .iter()
        .map(|t| {
            let mut row = vec![t.raw.clone()];
            match &t.path {
                Some(p) => {
                    for level in [&p.pt, &p.hlt, &p.hlgt, &p.soc] {
                        row.push(level.name.clone());
                        row.push(level.code.to_string());
                    }
                }
                None => row.extend(std::iter::repeat_n(String::new(), 8)),
            }
            row.push(t.method.label().to_string());
            row.push(t.note.clone());
            row
        })
        .collect()
}

pub fn mapping_from_rows(rows: &[Vec<String>]) -> Result<Vec<MappedTerm>, String> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let cell = |k: usize| row.get(k).map(String::as_str).unwrap_or("");
            let method = MatchMethod::from_label(cell(9)).ok_or_else(|| format!("row {}: bad match method {:?}", i + 1, cell(9)))?;
            let level = |k: usize| -> Result<Level, String> {
                Ok(Level {
                    name: cell(k).to_string(),
                    code: cell(k + 1).parse().map_err(|_| format!("row {}: bad code {:?}", i + 1, cell(k + 1)))?,
                })
            };
            let path = if cell(2).is_empty() {
                None
            } else {
                Some(HierarchyPath {
                    pt: level(1)?,
                    hlt: level(3)?,
                    hlgt: level(5)?,
                    soc: level(7)?,
                })
            };
            Ok(MappedTerm {
                raw: cell(0).to_string(),
                path,
                method,
                note: cell(10).to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{StubGateway, StubRule};

    const SOC: &str = "93000001$Gastrointestinal disorders$GI$\n93000002$Nervous system disorders$Nerv$\n93000007$Cardiac disorders$Card$\n";
    const HLGT: &str = "92000001$Headaches$\n92000002$Neurological disorders NEC$\n92000010$Gastrointestinal signs and symptoms$\n92000060$Cardiac arrhythmias$\n";
    const HLT: &str = "91000001$Headaches NEC$\n91000004$Disturbances in consciousness NEC$\n91000011$Dyspeptic signs and symptoms$\n91000060$Rate and rhythm disorders NEC$\n91000099$Orphan HLT$\n";
    const PT: &str = "90000001$Headache$$93000002$\n90000020$Dyspepsia$$93000001$\n90000021$Abdominal discomfort$$93000001$\n90000030$Syncope-like$$93000007$\n90000040$Orphan term$$\n";
    const SOC_HLGT: &str = "93000002$92000001$\n93000002$92000002$\n93000001$92000010$\n93000007$92000060$\n";
    const HLGT_HLT: &str = "92000001$91000001$\n92000002$91000004$\n92000010$91000011$\n92000060$91000060$\n";
    const HLT_PT: &str = "91000001$90000001$\n91000011$90000020$\n91000011$90000021$\n91000004$90000030$Y$\n91000060$90000030$N$\n91000099$90000040$\n";

    fn files() -> AscFiles {
        AscFiles {
            soc: SOC.into(),
            hlgt: HLGT.into(),
            hlt: HLT.into(),
            pt: PT.into(),
            soc_hlgt: SOC_HLGT.into(),
            hlgt_hlt: HLGT_HLT.into(),
            hlt_pt: HLT_PT.into(),
            release: Some("28.0$English$\n".into()),
        }
    }

    fn hierarchy(policy: AxialityPolicy) -> Hierarchy {
        Hierarchy::from_files(&files(), policy).unwrap()
    }

    #[test]
    fn headache_resolves_through_all_levels() {
        let h = hierarchy(AxialityPolicy::LastLoaded);
        assert_eq!(h.version, "28.0");
        assert_eq!(match_exact("headache", &h), Some(Code(90000001)));
        let path = resolve_hierarchy(Code(90000001), &h).unwrap();
        assert_eq!(path.hlt.name, "Headaches NEC");
        assert_eq!(path.hlgt.name, "Headaches");
        assert_eq!(path.soc.name, "Nervous system disorders");
    }

    #[test]
    fn exact_match_is_literal() {
        let h = hierarchy(AxialityPolicy::LastLoaded);
        assert_eq!(match_exact("  HEADACHE ", &h), Some(Code(90000001)));
        assert_eq!(match_exact("head ache", &h), None);
        assert_eq!(match_exact("", &h), None);
    }

    #[test]
    fn multi_axial_pt_follows_policy() {
        let last = hierarchy(AxialityPolicy::LastLoaded);
        assert_eq!(last.resolve(Code(90000030)).unwrap().soc.name, "Cardiac disorders");
        let primary = hierarchy(AxialityPolicy::PrimaryFlag);
        assert_eq!(primary.resolve(Code(90000030)).unwrap().soc.name, "Nervous system disorders");
    }

    #[test]
    fn primary_flag_falls_back_to_pt_primary_soc() {
        let mut f = files();
        f.hlt_pt = "91000004$90000030$\n91000060$90000030$\n91000001$90000001$\n".into();
        f.pt = "90000001$Headache$$93000002$\n90000030$Syncope-like$$93000002$\n".into();
        let h = Hierarchy::from_files(&f, AxialityPolicy::PrimaryFlag).unwrap();
        assert_eq!(h.resolve(Code(90000030)).unwrap().soc.name, "Nervous system disorders");
        let h = Hierarchy::from_files(&f, AxialityPolicy::LastLoaded).unwrap();
        assert_eq!(h.resolve(Code(90000030)).unwrap().soc.name, "Cardiac disorders");
    }

    #[test]
    fn reverse_index_inverts_top_down() {
        for policy in [AxialityPolicy::LastLoaded, AxialityPolicy::PrimaryFlag] {
            let h = hierarchy(policy);
            let mut from_reverse = BTreeSet::new();
            for soc in h.soc_list() {
                for pt in h.pts_in_soc(*soc) {
                    assert_eq!(h.resolve(pt).unwrap().soc.code, *soc);
                    from_reverse.insert(pt);
                }
            }
            let from_top: BTreeSet<Code> = h.pt_hlt.keys().filter(|pt| h.resolve(**pt).is_ok()).copied().collect();
            assert_eq!(from_reverse, from_top);
        }
    }

    #[test]
    fn broken_chain_is_reported() {
        let h = hierarchy(AxialityPolicy::LastLoaded);
        assert_eq!(h.resolve(Code(90000040)), Err(HierarchyError::MissingHlgtLink(Code(91000099))));
        assert!(h.load_warnings.iter().any(|w| w.contains("broken chain")));
        assert_eq!(h.resolve(Code(1)), Err(HierarchyError::UnknownPt(Code(1))));
    }

    #[test]
    fn malformed_rows_are_skipped_with_line_numbers() {
        let mut f = files();
        f.hlt_pt = format!("{HLT_PT}garbage$row$\nnot-a-row\n");
        let h = Hierarchy::from_files(&f, AxialityPolicy::LastLoaded).unwrap();
        assert!(h.load_warnings.iter().any(|w| w == "hlt_pt.asc:7: malformed linkage row skipped"));
        assert!(h.load_warnings.iter().any(|w| w == "hlt_pt.asc:8: malformed linkage row skipped"));
    }

    #[test]
    fn empty_linkage_file_is_load_error() {
        let mut f = files();
        f.hlt_pt = String::new();
        assert!(matches!(
            Hierarchy::from_files(&f, AxialityPolicy::LastLoaded),
            Err(LoadError::EmptyFile(name)) if name == "hlt_pt.asc"
        ));
    }

    #[test]
    fn missing_file_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("soc.asc"), SOC).unwrap();
        assert!(matches!(load_hierarchy(dir.path(), AxialityPolicy::LastLoaded), Err(LoadError::MissingFile(_))));
    }

    fn rule(task: Task, subject: &str, response: &str) -> StubRule {
        StubRule {
            task: Some(task),
            subject: Some(subject.into()),
            response: response.into(),
            ..StubRule::default()
        }
    }

    #[test]
    fn soc_predictions_are_filtered_and_capped() {
        let h = hierarchy(AxialityPolicy::LastLoaded);
        let cfg = GatewayConfig::default();
        let stub = StubGateway::new(vec![
            rule(Task::PredictSocs, "stomach upset", "Gastrointestinal disorders"),
            rule(
                Task::PredictSocs,
                "four",
                "1. Cardiac disorders\n2. nervous system disorders\n3. Gastrointestinal disorders\n4. Cardiac disorders",
            ),
            rule(Task::PredictSocs, "bogus", "Disorders of the imagination"),
            rule(Task::PredictSocs, "inline", "Cardiac disorders; Gastrointestinal disorders"),
        ]);
        assert_eq!(predict_socs("stomach upset", &stub, &h, &cfg), [Code(93000001)]);
        assert_eq!(predict_socs("four", &stub, &h, &cfg), [Code(93000007), Code(93000002), Code(93000001)]);
        assert!(predict_socs("bogus", &stub, &h, &cfg).is_empty());
        assert_eq!(predict_socs("inline", &stub, &h, &cfg), [Code(93000007), Code(93000001)]);

        let mut many = String::new();
        for name in ["Cardiac disorders", "Nervous system disorders", "Gastrointestinal disorders"] {
            many.push_str(name);
            many.push('\n');
        }
        let f = files();
        let mut bigger = f.clone();
        bigger.soc.push_str("93000004$Infections and infestations$Inf$\n");
        let h4 = Hierarchy::from_files(&bigger, AxialityPolicy::LastLoaded).unwrap();
        let stub = StubGateway::constant(&format!("{many}Infections and infestations"));
        assert_eq!(predict_socs("x", &stub, &h4, &cfg).len(), 3);
    }

    #[test]
    fn soc_prediction_failure_is_empty() {
        let h = hierarchy(AxialityPolicy::LastLoaded);
        let stub = StubGateway::new(vec![StubRule { error: Some("down".into()), ..StubRule::default() }]);
        assert!(predict_socs("x", &stub, &h, &GatewayConfig::default()).is_empty());
        assert_eq!(match_soc_filtered("x", &[Code(93000001)], &stub, &h, &GatewayConfig::default()), None);
    }

    #[test]
    fn soc_filtered_selection_is_validated() {
        let h = hierarchy(AxialityPolicy::LastLoaded);
        let cfg = GatewayConfig::default();
        let gi = [Code(93000001)];
        let stub = StubGateway::new(vec![
            rule(Task::SelectPt, "stomach upset", "Dyspepsia"),
            rule(Task::SelectPt, "outside", "Headache"),
            rule(Task::SelectPt, "nothing", "NONE"),
        ]);
        assert_eq!(match_soc_filtered("stomach upset", &gi, &stub, &h, &cfg), Some(Code(90000020)));
        assert_eq!(match_soc_filtered("outside", &gi, &stub, &h, &cfg), None);
        assert_eq!(match_soc_filtered("nothing", &gi, &stub, &h, &cfg), None);
        let calls = stub.total_calls();
        assert_eq!(match_soc_filtered("stomach upset", &[Code(42)], &stub, &h, &cfg), None);
        assert_eq!(stub.total_calls(), calls, "empty pool must not call the gateway");
    }

    #[test]
    fn candidates_are_sorted_and_batched() {
        let names: Vec<String> = (0..200).map(|i| format!("Candidate term number {i:03}")).collect();
        let batches = batch_candidates(&names, "t", 2000);
        assert!(batches.len() > 1);
        assert_eq!(batches.concat(), names);
        assert_eq!(batch_candidates(&names, "t", 128_000).len(), 1);
    }

    #[test]
    fn batched_selection_runs_a_final_round() {
        let h = hierarchy(AxialityPolicy::LastLoaded);
        let cfg = GatewayConfig { max_context: 1100, ..GatewayConfig::default() };
        let prompt_tokens = estimate_tokens(SELECT_PT_PROMPT);
        assert!(prompt_tokens + REPLY_RESERVE_TOKENS > cfg.max_context - 200, "test assumes tiny budget");
        let stub = StubGateway::new(vec![StubRule {
            task: Some(Task::SelectPt),
            response: "Dyspepsia\n".into(),
            ..StubRule::default()
        }]);
        let got = try_match_soc_filtered("upset", &[Code(93000001)], &stub, &h, &cfg).unwrap();
        assert_eq!(got, Some(Code(90000020)));
        assert_eq!(stub.calls(Task::SelectPt), 2, "one call per single-candidate batch");
    }

    #[test]
    fn two_pass_mapping() {
        let h = hierarchy(AxialityPolicy::LastLoaded);
        let cfg = GatewayConfig::default();
        let stub = StubGateway::new(vec![
            rule(Task::PredictSocs, "stomach upset", "Gastrointestinal disorders"),
            rule(Task::SelectPt, "stomach upset", "Dyspepsia"),
        ]);
        let exact = map_term("headache", &h, &stub, &cfg);
        assert_eq!(exact.method, MatchMethod::ExactMatch);
        assert_eq!(stub.total_calls(), 0);

        let filtered = map_term("stomach upset", &h, &stub, &cfg);
        assert_eq!(filtered.method, MatchMethod::SocFilteredMatch);
        assert_eq!(filtered.path.unwrap().pt.name, "Dyspepsia");

        let none = map_term("zzz-nonsense", &h, &stub, &cfg);
        assert_eq!(none.method, MatchMethod::Unmatched);
        assert!(none.path.is_none());

        let broken = StubGateway::new(vec![StubRule { error: Some("down".into()), ..StubRule::default() }]);
        assert_eq!(map_term("stomach upset", &h, &broken, &cfg).method, MatchMethod::Error);
        assert_eq!(map_term("orphan term", &h, &broken, &cfg).method, MatchMethod::Error);
    }

    #[test]
    fn mapping_rows_round_trip() {
        let h = hierarchy(AxialityPolicy::LastLoaded);
        let stub = StubGateway::default();
        let terms = vec![
            map_term("Headache", &h, &stub, &GatewayConfig::default()),
            MappedTerm::failed("zzz", MatchMethod::Unmatched, "no SOC predicted"),
        ];
        assert_eq!(mapping_from_rows(&mapping_to_rows(&terms)).unwrap(), terms);
    }
}
