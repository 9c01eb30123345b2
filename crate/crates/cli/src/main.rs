use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use refset_core::pipeline::{Pipeline, RunConfig, RunReport, Stage};
use tracing_subscriber::EnvFilter;

/// Builds a time-indexed drug/adverse-event reference dataset from product
/// labels and register metadata.
#[derive(Debug, Parser)]
#[command(name = "refset", version)]
struct Cli {
    /// TOML run configuration. `REFSET_*` environment variables override it.
    #[arg(short, long, global = true, default_value = "refset.toml")]
    config: PathBuf,

    /// Log filter, e.g. `info` or `refset_core=debug`. Falls back to RUST_LOG.
    #[arg(long, global = true)]
    log: Option<String>,

    /// Human-readable logs instead of JSON lines.
    #[arg(long, global = true)]
    pretty: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the brand index and join the medicines report.
    Index,
    /// Fetch and parse register product pages.
    Scrape,
    /// Download label documents for each procedure.
    Fetch,
    /// Extract and store section 4.8 of every version.
    Sections,
    /// Extract adverse events from each stored section.
    Extract,
    /// Map extracted terms onto the terminology.
    Map,
    /// Date each adverse event by its first appearance.
    Timeline,
    /// Join everything into the export dataset.
    Assemble,
    /// Score extraction against gold lists and summarise mapping.
    Validate,
    /// Compute characterisation tables.
    Analyze,
    /// Run every stage in order.
    All,
    /// Print the resolved configuration and its hash.
    Config,
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        match self {
            Self::Index => vec![Stage::Index],
            Self::Scrape => vec![Stage::Scrape],
            Self::Fetch => vec![Stage::Fetch],
            Self::Sections => vec![Stage::Sections],
            Self::Extract => vec![Stage::Extract],
            Self::Map => vec![Stage::Map],
            Self::Timeline => vec![Stage::Timeline],
            Self::Assemble => vec![Stage::Assemble],
            Self::Validate => vec![Stage::Validate],
            Self::Analyze => vec![Stage::Analyze],
            Self::All => Stage::ALL.to_vec(),
            Self::Config => Vec::new(),
        }
    }
}

fn init_logging(cli: &Cli) {
    let filter = match &cli.log {
        Some(f) => EnvFilter::new(f),
        None => EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
    };
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    if cli.pretty {
        builder.init();
    } else {
        builder.json().with_current_span(false).init();
    }
}

fn print_report(report: &RunReport) {
    for s in &report.stages {
        let name = s.stage.map(|st| st.name()).unwrap_or("?");
        println!(
            "{name:<9} ok={} failed={} warnings={} outputs={} {}ms",
            s.successes, s.failures, s.warnings, s.outputs, s.duration_ms
        );
    }
    if let Some(f) = &report.fatal {
        println!("fatal: {f}");
    }
}

fn run(cli: &Cli) -> anyhow::Result<i32> {
    let cfg = RunConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if let Command::Config = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        println!("config_hash = {}", cfg.hash());
        return Ok(RunReport::EXIT_OK);
    }
    let pipeline = Pipeline::new(cfg)?;
    let report = pipeline.run(&cli.command.stages());
    print_report(&report);
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(RunReport::EXIT_FATAL as u8)
        }
    }
}
