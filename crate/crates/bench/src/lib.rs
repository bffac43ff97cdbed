//! Benchmark harness for quantized speculative decoding: corpus ingestion,
//! the run matrix over methods, temperatures, `γ` and lookup ranges, and
//! JSON/CSV reports.

use std::path::PathBuf;

use qverify_core::model::ModelError;
use qverify_core::quant::QuantError;
use qverify_core::specdec::SpecDecError;
use thiserror::Error;

pub mod config;
pub mod corpus;
pub mod report;
pub mod runner;
pub mod tokenizer;

pub use config::{Method, RunConfig};
pub use corpus::{ingest_corpus, Prompt};
pub use report::{
    emit_report, CellKey, ReportFormat, RunRecord, RunReport, RunSummary, CSV_HEADER,
    SCHEMA_VERSION,
};
pub use runner::{derive_seed, load_models, run_matrix, run_matrix_with, Models, RunOptions};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corpus {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    SpecDec(#[from] SpecDecError),
}

pub type Result<T> = std::result::Result<T, BenchError>;
