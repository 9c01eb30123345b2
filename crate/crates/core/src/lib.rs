//! Builds a time-indexed drug / adverse-event reference dataset from
//! versioned EU product labels (SmPCs) and Union Register metadata.
//!
//! The crate is organised as one module per pipeline stage. Stage outputs are
//! plain files under a corpus root, so each stage can be rerun on its own; the
//! [`pipeline`] module wires them together.

pub mod ae_extractor;
pub mod analytics;
pub mod dataset;
pub mod dates;
pub mod fsutil;
pub mod gateway;
pub mod meddra;
pub mod pipeline;
pub mod register_index;
pub mod register_scraper;
pub mod smpc_corpus;
pub mod time_indexer;
pub mod validation;

pub use chrono::NaiveDate;
