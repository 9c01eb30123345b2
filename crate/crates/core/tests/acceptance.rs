//! Acceptance suite. Runs every criterion on the bundled fixtures and prints
//! one PASS/FAIL line each; exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refset_core::analytics::{self, UbiquityBuckets};
use refset_core::dataset::{self, DrugAeAssociation};
use refset_core::gateway::{GatewayConfig, StubGateway};
use refset_core::meddra::{self, AscFiles, AxialityPolicy, Code, Hierarchy, MappedTerm, MatchMethod};
use refset_core::pipeline::{Pipeline, RunConfig, Stage};
use refset_core::register_index::{self, IndexColumns, RawTable};
use refset_core::smpc_corpus;
use refset_core::time_indexer::{self, AeKey, Source, VersionAes};
use refset_core::validation::{self, Category};
use refset_core::NaiveDate;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn dictionary(policy: AxialityPolicy) -> Result<Hierarchy, String> {
    meddra::load_hierarchy(&fixtures().join("meddra"), policy).map_err(|e| e.to_string())
}

fn section_locator() -> Outcome {
    let dir = fixtures().join("pdf");
    for variant in ["bare", "numbered", "numbered_dot", "split_line"] {
        let bytes = std::fs::read(dir.join(format!("heading_{variant}.pdf"))).map_err(|e| e.to_string())?;
        let text = smpc_corpus::extract_text(&bytes).map_err(|e| format!("{variant}: {e}"))?;
        let section = smpc_corpus::section_text(&text.text).map_err(|e| format!("{variant}: {e}"))?;
        ensure(section.contains("Headache") && section.contains("Nausea"), || format!("{variant}: body lost: {section:?}"))?;
        ensure(!section.contains("Overdose") && !section.contains("None known"), || {
            format!("{variant}: section overran: {section:?}")
        })?;
    }
    let bytes = std::fs::read(dir.join("heading_missing.pdf")).map_err(|e| e.to_string())?;
    let text = smpc_corpus::extract_text(&bytes).map_err(|e| e.to_string())?;
    ensure(smpc_corpus::section_text(&text.text).is_err(), || "negative document yielded a section".into())?;
    Ok("4/4 heading variants located, negative rejected".into())
}

fn register_parsing() -> Outcome {
    let table = RawTable::load(&fixtures().join("brand_index_20.csv")).map_err(|e| e.to_string())?;
    let data_rows = table.rows.len() - IndexColumns::default().header_row - 1;
    ensure(data_rows == 20, || format!("fixture has {data_rows} rows"))?;
    let index = register_index::parse_brand_index(&table, &IndexColumns::default()).map_err(|e| e.to_string())?;
    let want: [(&str, u32); 12] = [
        ("Abilify", 276),
        ("Aclasta", 308),
        ("Aerius", 160),
        ("Cimzia", 544),
        ("Enbrel", 126),
        ("Fluenz", 661),
        ("Herceptin", 145),
        ("Keytruda", 1024),
        ("Nexviadyme", 1643),
        ("Prevenar 13", 590),
        ("Revlimid", 391),
        ("Zypadhera", 479),
    ];
    ensure(index.entries.len() == 12, || format!("{} entries", index.entries.len()))?;
    for (e, (brand, h)) in index.entries.iter().zip(want) {
        ensure(e.brand_name == brand && e.h_number.get() == h, || format!("{} h{} != {brand} h{h}", e.brand_name, e.h_number))?;
        let url = format!("https://ec.europa.eu/health/documents/community-register/html/h{h}.htm");
        ensure(e.register_url == url, || format!("{}: {}", brand, e.register_url))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let year: u8 = rng.gen_range(0..100);
        let seq: u32 = rng.gen_range(1..10_000);
        let width = rng.gen_range(seq.to_string().len()..=4);
        let text = format!("EU/1/{year:02}/{seq:0width$}");
        let parsed = register_index::parse_eu_number(&text).map_err(|e| e.to_string())?;
        ensure(parsed.year == year && parsed.sequence.get() == seq, || format!("{text} parsed as {parsed:?}"))?;
        let again = register_index::parse_eu_number(&format!("EU/1/{:02}/{}", parsed.year, parsed.sequence))
            .map_err(|e| e.to_string())?;
        ensure(again == parsed, || format!("{text} did not round-trip"))?;
        let url = register_index::build_product_url(parsed.sequence);
        ensure(url.ends_with(&format!("/h{seq}.htm")), || url.clone())?;
    }
    Ok("12/20 rows kept with expected h-numbers; 1000 EU numbers round-trip".into())
}

/// PT names read straight from the distribution file.
fn pt_names() -> Result<Vec<(Code, String)>, String> {
    let text = std::fs::read_to_string(fixtures().join("meddra").join("pt.asc")).map_err(|e| e.to_string())?;
    Ok(text
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('$').collect();
            (Code(f[0].parse().unwrap()), f[1].to_string())
        })
        .collect())
}

fn shuffle_case(s: &str, rng: &mut impl Rng) -> String {
    s.chars()
        .map(|c| if rng.gen_bool(0.5) { c.to_ascii_uppercase() } else { c.to_ascii_lowercase() })
        .collect()
}

fn perturb(s: &str, rng: &mut impl Rng) -> String {
    let mut chars: Vec<char> = s.chars().collect();
    let i = rng.gen_range(0..chars.len());
    match rng.gen_range(0..3) {
        0 => chars.insert(i, rng.gen_range(b'a'..=b'z') as char),
        1 => {
            chars.remove(i);
        }
        _ => chars.push('s'),
    }
    chars.into_iter().collect()
}

fn mapping_engine() -> Outcome {
    let h = dictionary(AxialityPolicy::LastLoaded)?;
    let names = pt_names()?;
    ensure(names.len() == 50 && h.pt_count() == 50, || format!("{} PTs", h.pt_count()))?;
    let oracle = |q: &str| {
        let q = q.trim().to_lowercase();
        names.iter().find(|(_, n)| n.to_lowercase() == q).map(|(c, _)| *c)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut members, mut others) = (Vec::new(), 0);
    for _ in 0..500 {
        let (_, name) = names.choose(&mut rng).unwrap();
        let query = if rng.gen_bool(0.5) {
            let pad = |r: &mut ChaCha8Rng| " ".repeat(r.gen_range(0..3));
            let q = format!("{}{}{}", pad(&mut rng), shuffle_case(name, &mut rng), pad(&mut rng));
            members.push(q.clone());
            q
        } else {
            others += 1;
            perturb(name, &mut rng)
        };
        let got = meddra::match_exact(&query, &h);
        ensure(got == oracle(&query), || format!("{query:?}: {got:?} vs oracle {:?}", oracle(&query)))?;
    }

    let stub = StubGateway::constant("Nervous system disorders");
    let cfg = GatewayConfig::default();
    for q in &members {
        let m = meddra::map_term(q, &h, &stub, &cfg);
        ensure(m.method == MatchMethod::ExactMatch, || format!("{q:?} mapped by {:?}", m.method))?;
    }
    ensure(stub.total_calls() == 0, || format!("gateway called {} times on exact matches", stub.total_calls()))?;
    meddra::map_term("no such term at all", &h, &stub, &cfg);
    ensure(stub.total_calls() > 0, || "stub counter did not register a fallback call".into())?;
    Ok(format!("500 queries agree with linear scan ({} members, {others} perturbed); 0 gateway calls on exact hits", members.len()))
}

fn multi_axiality() -> Outcome {
    let last = dictionary(AxialityPolicy::LastLoaded)?;
    let flagged = dictionary(AxialityPolicy::PrimaryFlag)?;
    let pt = last.pt_by_name("Syncope-like").ok_or("Syncope-like missing")?;
    let soc_last = last.resolve(pt).map_err(|e| e.to_string())?.soc.name;
    let soc_flag = flagged.resolve(pt).map_err(|e| e.to_string())?.soc.name;
    ensure(soc_last == "Cardiac disorders", || format!("LastLoaded gave {soc_last}"))?;
    ensure(soc_flag == "Nervous system disorders", || format!("PrimaryFlag gave {soc_flag}"))?;

    let base = AscFiles::read_dir(&fixtures().join("meddra")).map_err(|e| e.to_string())?;
    let hlts: Vec<u32> = base.hlt.lines().map(|l| l.split('$').next().unwrap().parse().unwrap()).collect();
    let pts: Vec<u32> = pt_names()?.iter().map(|(c, _)| c.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for round in 0..100 {
        let mut rows = Vec::new();
        for &p in &pts {
            for _ in 0..rng.gen_range(1..=3) {
                rows.push((*hlts.choose(&mut rng).unwrap(), p, rng.gen_bool(0.2)));
            }
        }
        rows.shuffle(&mut rng);
        let mut oracle = HashMap::new();
        for &(parent, child, _) in &rows {
            oracle.insert(child, parent);
        }
        let text: String = rows
            .iter()
            .map(|(a, b, f)| format!("{a}${b}${}$\n", if *f { "Y" } else { "" }))
            .collect();
        let files = AscFiles { hlt_pt: text, ..base.clone() };
        let h = Hierarchy::from_files(&files, AxialityPolicy::LastLoaded).map_err(|e| e.to_string())?;
        for &p in &pts {
            let got = h.pt_parent(Code(p)).map(|c| c.0);
            ensure(got == Some(oracle[&p]), || format!("round {round}: PT {p} -> {got:?}, oracle {}", oracle[&p]))?;
        }
    }
    Ok("flag resolves Nervous, last-loaded Cardiac; 100 random linkage files match overwrite oracle".into())
}

fn time_indexing() -> Outcome {
    let h = dictionary(AxialityPolicy::LastLoaded)?;
    let codes: Vec<Code> = pt_names()?.iter().map(|(c, _)| *c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let day0 = NaiveDate::from_ymd_opt(1995, 1, 1).unwrap();
    let mut total = 0;
    for product in 0..100 {
        let n_aes = rng.gen_range(1..=30);
        let pool: Vec<MappedTerm> = (0..n_aes)
            .map(|i| {
                if i % 7 == 6 {
                    MappedTerm::failed(&format!("Unmapped {i}"), MatchMethod::Unmatched, "")
                } else {
                    let code = codes[(i * 3 + product) % codes.len()];
                    let path = h.resolve(code).unwrap();
                    MappedTerm {
                        raw: path.pt.name.clone(),
                        path: Some(path),
                        method: MatchMethod::ExactMatch,
                        note: String::new(),
                    }
                }
            })
            .collect();
        let n_versions = rng.gen_range(1..=10);
        let mut versions: Vec<VersionAes> = (0..n_versions)
            .map(|v| VersionAes {
                version_date: day0 + chrono::Days::new(rng.gen_range(0..3000) / 30 * 30),
                is_initial: false,
                source_file: format!("v{v}.pdf"),
                procedure_id: format!("P{v}"),
                terms: pool.iter().filter(|_| rng.gen_bool(0.4)).cloned().collect(),
            })
            .collect();
        let min_date = versions.iter().map(|v| v.version_date).min().unwrap();
        versions.iter_mut().find(|v| v.version_date == min_date).unwrap().is_initial = true;

        let got = time_indexer::build_timeline("P", &versions).map_err(|e| e.to_string())?;

        // Linear scan: for each key its earliest version, ties to input order.
        let mut oracle: BTreeMap<String, (NaiveDate, String)> = BTreeMap::new();
        for v in &versions {
            for t in &v.terms {
                let k = AeKey::of(t).to_string();
                match oracle.get(&k) {
                    Some((d, _)) if *d <= v.version_date => {}
                    _ => {
                        oracle.insert(k, (v.version_date, v.procedure_id.clone()));
                    }
                }
            }
        }
        let got_map: BTreeMap<String, (NaiveDate, String)> = got
            .iter()
            .map(|e| (e.key().to_string(), (e.date_added, e.procedure_id.clone())))
            .collect();
        ensure(got_map.len() == got.len(), || format!("product {product}: duplicate keys"))?;
        ensure(got_map == oracle, || format!("product {product}: {got_map:?} vs {oracle:?}"))?;
        for e in &got {
            let expect = if e.date_added == min_date { Source::Baseline } else { Source::PostApproval };
            ensure(e.source == expect, || format!("product {product}: {} labelled {:?}", e.key(), e.source))?;
        }
        let baseline_keys: HashSet<String> = versions
            .iter()
            .filter(|v| v.version_date == min_date)
            .flat_map(|v| v.terms.iter().map(|t| AeKey::of(t).to_string()))
            .collect();
        let union: HashSet<String> = versions.iter().flat_map(|v| v.terms.iter().map(|t| AeKey::of(t).to_string())).collect();
        let n_base = got.iter().filter(|e| e.source == Source::Baseline).count();
        let n_post = got.iter().filter(|e| e.source == Source::PostApproval).count();
        ensure(n_base == baseline_keys.len() && n_base + n_post == union.len(), || {
            format!("product {product}: partition {n_base}+{n_post} vs {}/{}", baseline_keys.len(), union.len())
        })?;
        total += got.len();
    }
    Ok(format!("100 products ({total} entries) match linear scan; baseline + post = distinct AEs"))
}

fn km_estimator() -> Outcome {
    let c = analytics::km_estimate(&[(1.0, true), (2.0, true), (3.0, true)]).map_err(|e| e.to_string())?;
    let s: Vec<f64> = c.steps.iter().map(|s| s.survival).collect();
    let want = [2.0 / 3.0, 1.0 / 3.0, 0.0];
    ensure(s.len() == 3 && s.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15), || format!("{s:?}"))?;
    ensure(c.median == Some(2.0), || format!("median {:?}", c.median))?;

    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut slowest = Duration::ZERO;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let data: Vec<(f64, bool)> = (0..1000).map(|_| (rng.gen_range(1..400) as f64, !rng.gen_bool(0.3))).collect();
        let start = Instant::now();
        let curve = analytics::km_estimate(&data).map_err(|e| e.to_string())?;
        slowest = slowest.max(start.elapsed());

        let times: BTreeSet<u64> = data.iter().filter(|(_, e)| *e).map(|(t, _)| *t as u64).collect();
        ensure(curve.steps.len() == times.len(), || format!("{} steps for {} event times", curve.steps.len(), times.len()))?;
        let mut s = 1.0;
        for (step, t) in curve.steps.iter().zip(&times) {
            let t = *t as f64;
            let at_risk = data.iter().filter(|(d, _)| *d >= t).count() as f64;
            let events = data.iter().filter(|(d, e)| *d == t && *e).count() as f64;
            s *= 1.0 - events / at_risk;
            ensure(step.time == t, || format!("step at {} vs {t}", step.time))?;
            let rel = if s == 0.0 { step.survival.abs() } else { ((step.survival - s) / s).abs() };
            worst = worst.max(rel);
            ensure(rel <= 1e-12, || format!("t={t}: {} vs {s}", step.survival))?;
        }
    }
    ensure(slowest < Duration::from_secs(1), || format!("slowest fit {slowest:?}"))?;
    Ok(format!("{{1,2,3}} exact, median 2; 20x1000 durations max rel err {worst:.1e}, slowest {slowest:?}"))
}

fn validation_harness() -> Outcome {
    let verdicts = validation::judge(&["A", "B", "B", "E"], &["A", "B", "C", "D"]);
    let counts = validation::counts(&verdicts);
    let want = [(Category::Correct, 2), (Category::Duplicate, 1), (Category::Incorrect, 1), (Category::Missing, 2), (Category::Triplicate, 0)];
    for (cat, n) in want {
        ensure(counts[&cat] == n, || format!("{cat}: {} != {n}", counts[&cat]))?;
    }
    let gold: Vec<String> = (0..20).map(|i| format!("Term {i}")).collect();
    let extracted = &gold[..19];
    let acc = validation::accuracy(&validation::judge(extracted, &gold)).map_err(|e| e.to_string())?;
    ensure((acc - 0.95).abs() < 1e-12, || format!("accuracy {acc}"))?;
    Ok("worked example 2/1/1/2; 19 correct + 1 missing gives 0.95".into())
}

const EXPECTED_COLUMNS: [&str; 36] = [
    "Brand_Name",
    "inn",
    "Union_register_eu_num",
    "Union_register_mah",
    "LLM_extracted_AE",
    "Source",
    "Reference Date",
    "Date Added",
    "MedDRA_PT_Term",
    "MedDRA_PT_Code",
    "MedDRA_HLT_Term",
    "MedDRA_HLT_Code",
    "MedDRA_HLGT_Term",
    "MedDRA_HLGT_Code",
    "MedDRA_SOC_Term",
    "MedDRA_SOC_Code",
    "MedDRA_Match_Method",
    "ATC_Level_1_Code",
    "ATC_Level_1_Desc",
    "ATC_Level_2_Code",
    "ATC_Level_2_Desc",
    "ATC_Level_3_Code",
    "ATC_Level_3_Desc",
    "ATC_Level_4_Code",
    "ATC_Level_4_Desc",
    "ATC_Level_5_Code",
    "ATC_Level_5_Desc",
    "Union_register_close_date",
    "Union_register_procedure",
    "Union_register_Ema_number",
    "Union_register_decisio_number",
    "Union_register_decision_date",
    "Union_register_link",
    "Union_register_indication",
    "Union_register_atc",
    "Source_File",
];

fn golden() -> PathBuf {
    fixtures().join("e2e").join("golden")
}

fn schema_lock() -> Outcome {
    ensure(dataset::COLUMNS == EXPECTED_COLUMNS, || format!("columns {:?}", dataset::COLUMNS))?;
    let csv_path = golden().join("dataset").join("refset_dataset_fixture.csv");
    let bytes = std::fs::read(&csv_path).map_err(|e| e.to_string())?;
    let header = String::from_utf8_lossy(&bytes).lines().next().unwrap_or("").to_string();
    let mut rdr = csv::Reader::from_reader(header.as_bytes());
    let fields: Vec<String> = rdr.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect();
    ensure(fields == EXPECTED_COLUMNS, || format!("golden header {fields:?}"))?;

    let (_, rows) = refset_core::fsutil::read_csv(&csv_path).map_err(|e| e.to_string())?;
    let rows = dataset::rows_from_table(&rows)?;
    let a = dataset::csv_export_bytes(&rows);
    let b = dataset::csv_export_bytes(&rows);
    ensure(a == b && a == bytes, || "CSV re-export differs".into())?;
    let xa = dataset::xlsx_export_bytes(&rows).map_err(|e| e.to_string())?;
    let xb = dataset::xlsx_export_bytes(&rows).map_err(|e| e.to_string())?;
    let xg = std::fs::read(golden().join("dataset").join("refset_dataset_fixture.xlsx")).map_err(|e| e.to_string())?;
    ensure(xa == xb && xa == xg, || "XLSX re-export differs".into())?;
    Ok(format!("36 columns in order; {} rows re-export byte-identically (csv, xlsx)", rows.len()))
}

fn compare_golden(corpus: &Path) -> Result<usize, String> {
    let mut n = 0;
    for sub in ["dataset", "analytics"] {
        let dir = golden().join(sub);
        let mut names: Vec<_> = std::fs::read_dir(&dir).map_err(|e| e.to_string())?.flatten().map(|e| e.file_name()).collect();
        names.sort();
        for name in names {
            let want = std::fs::read(dir.join(&name)).map_err(|e| e.to_string())?;
            let got_path = corpus.join(sub).join(&name);
            let got = std::fs::read(&got_path).map_err(|e| format!("{}: {e}", got_path.display()))?;
            ensure(got == want, || format!("{sub}/{} differs from golden", name.to_string_lossy()))?;
            n += 1;
        }
    }
    Ok(n)
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::load(&fixtures().join("e2e").join("config.toml")).map_err(|e| e.to_string())?;
    cfg.corpus_root = tmp.path().join("corpus");
    cfg.cache_dir = None;
    let mut files = 0;
    for run in 1..=2 {
        let pipeline = Pipeline::new(cfg.clone()).map_err(|e| e.to_string())?;
        let report = pipeline.run(&Stage::ALL);
        ensure(report.fatal.is_none(), || format!("run {run}: {:?}", report.fatal))?;
        ensure(report.stages.len() == Stage::ALL.len(), || format!("run {run}: {} stages", report.stages.len()))?;
        files = compare_golden(&cfg.corpus_root).map_err(|e| format!("run {run}: {e}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("2 runs, {files} golden files byte-identical, {elapsed:.2?}"))
}

fn random_row(rng: &mut impl Rng) -> DrugAeAssociation {
    let product = rng.gen_range(0..60);
    let pt = rng.gen_range(0..300);
    let date = match rng.gen_range(0..50) {
        0 => String::new(),
        1 => "not a date".into(),
        _ => format!("{}-{:02}-{:02}", rng.gen_range(1995..2026), rng.gen_range(1..13), rng.gen_range(1..29)),
    };
    DrugAeAssociation {
        eu_number: format!("EU/1/{:02}/{product}", product % 30),
        brand_name: format!("Brand{product}"),
        inn: format!("inn{product}"),
        date_added: date,
        source: if rng.gen_bool(0.4) { Source::PostApproval } else { Source::Baseline }.label().into(),
        extracted_ae: format!("Term {pt}"),
        pt_code: if pt % 10 == 0 { String::new() } else { (90_000_000 + pt).to_string() },
        soc_term: if pt % 10 == 0 { String::new() } else { format!("SOC {}", pt % 27) },
        atc1_code: ["A", "B", "C", "J", "L", "N", ""][product % 7].into(),
        procedure: ["Variation type II", "PSUSA", "Renewal"][pt % 3].into(),
        ..DrugAeAssociation::default()
    }
}

fn analytics_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let mut total_rows = 0;
    for round in 0..100 {
        let n = if round == 0 { 10_000 } else { rng.gen_range(0..=10_000) };
        let rows: Vec<DrugAeAssociation> = (0..n).map(|_| random_row(&mut rng)).collect();
        total_rows += n;

        let (cum, excluded) = analytics::cumulative_growth(&rows);
        let annual = analytics::annual_additions(&rows, false);
        let mut prev = 0;
        for (c, a) in cum.iter().zip(&annual.rows) {
            ensure(c.cumulative == prev + c.added && a.count == c.added && a.key == c.year.to_string(), || {
                format!("round {round}: year {} breaks running total", c.year)
            })?;
            prev = c.cumulative;
        }
        ensure(prev + excluded == rows.len(), || format!("round {round}: {prev} + {excluded} != {}", rows.len()))?;
        let brute: usize = rows.iter().filter(|r| refset_core::dates::parse_date(&r.date_added).is_some()).count();
        ensure(prev == brute, || format!("round {round}: cumulative {prev} vs {brute}"))?;

        let ubiquity = analytics::ubiquity(&rows, &UbiquityBuckets::default());
        let tables = [
            ("annual", annual),
            ("post", analytics::annual_additions(&rows, true)),
            ("source", analytics::source_split(&rows)),
            ("procedure", analytics::procedure_type_distribution(&rows)),
            ("soc", analytics::soc_distribution(&rows)),
            ("atc1", analytics::atc_level1_distribution(&rows)),
            ("ubiquity", ubiquity.table.clone()),
        ];
        for (name, t) in &tables {
            if t.total() > 0 {
                let sum: f64 = t.rows.iter().map(|r| r.fraction).sum();
                ensure((sum - 1.0).abs() < 1e-9, || format!("round {round}: {name} fractions sum to {sum}"))?;
            }
        }
        ensure(ubiquity.table.total() == ubiquity.unique_pts, || format!("round {round}: ubiquity buckets"))?;

        let new_total: usize = analytics::new_pt_introduction(&rows).iter().map(|(_, c)| c).sum();
        let distinct: HashSet<&str> = rows
            .iter()
            .filter(|r| !r.pt_code.is_empty() && refset_core::dates::parse_date(&r.date_added).is_some())
            .map(|r| r.pt_code.as_str())
            .collect();
        ensure(new_total == distinct.len(), || format!("round {round}: new PTs {new_total} vs {}", distinct.len()))?;
    }
    Ok(format!("100 datasets ({total_rows} rows): running totals, fraction sums, new-PT totals hold"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("section-locator", section_locator),
        ("register-parsing", register_parsing),
        ("mapping-engine", mapping_engine),
        ("multi-axiality", multi_axiality),
        ("time-indexing", time_indexing),
        ("km-estimator", km_estimator),
        ("validation-harness", validation_harness),
        ("schema-lock", schema_lock),
        ("end-to-end", end_to_end),
        ("analytics-identities", analytics_identities),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS  {name:<22} {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name:<22} {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name:<22} panicked");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
