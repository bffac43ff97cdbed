use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use qverify_core::perfmodel::PerfAnnotation;
use qverify_core::specdec::DecodeMetrics;
use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig};
use crate::{BenchError, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: &str =
    "method,temperature,gamma,k_min,k_max,steps,total_tokens,L,acceptance_rate,tokens_per_second,speedup,weight_bytes_loaded";

/// One point of the grid. Fields that do not apply to a method are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub method: Method,
    pub temperature: f32,
    pub gamma: Option<usize>,
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
    pub retain_fraction: Option<f64>,
}

impl CellKey {
    pub fn vanilla(temperature: f32) -> Self {
        Self {
            method: Method::Vanilla,
            temperature,
            gamma: None,
            k_min: None,
            k_max: None,
            retain_fraction: None,
        }
    }

    /// Method name, with the retention appended for the pruned drafter.
    pub fn label(&self) -> String {
        match self.retain_fraction {
            Some(r) => format!("{}@{r}", self.method),
            None => self.method.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: CellKey,
    pub prompt_index: usize,
    /// Sampling seed of this run; `generate --seed` with it reproduces the output.
    pub seed: u64,
    pub metrics: DecodeMetrics,
    /// Relative to the vanilla run of the same prompt and temperature.
    pub speedup: f64,
}

/// Aggregate of one cell over the prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cell: CellKey,
    pub prompts: usize,
    /// Counts and times summed over prompts, ratios recomputed from the sums.
    pub micro: DecodeMetrics,
    pub micro_speedup: f64,
    /// Unweighted means of the per-prompt values.
    pub macro_mean_acceptance_length: f64,
    pub macro_acceptance_rate: f64,
    pub macro_speedup: f64,
    /// Tokens per weight byte relative to vanilla: the speedup of a purely
    /// bandwidth-bound machine.
    pub bandwidth_bound_speedup: f64,
    /// Model fitted to this cell's timings; absent without timings.
    pub perf: Option<PerfAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    /// False when timing fields were zeroed for reproducible output.
    pub timings: bool,
    pub notes: Vec<String>,
    pub records: Vec<RunRecord>,
    pub summaries: Vec<RunSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes the report. JSON holds everything; CSV holds one row per record
/// under [`CSV_HEADER`].
pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<()> {
    let io_err = |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, report).map_err(|source| BenchError::Json {
                path: path.to_path_buf(),
                source,
            })?;
            out.write_all(b"\n").map_err(io_err)?;
        }
        ReportFormat::Csv => write_csv(report, &mut out).map_err(|source| BenchError::Csv {
            path: path.to_path_buf(),
            source,
        })?,
    }
    out.flush().map_err(io_err)
}

fn write_csv<W: Write>(report: &RunReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in &report.records {
        let m = &r.metrics;
        w.write_record([
            r.cell.label(),
            r.cell.temperature.to_string(),
            opt(r.cell.gamma),
            opt(r.cell.k_min),
            opt(r.cell.k_max),
            m.steps.to_string(),
            m.total_tokens.to_string(),
            m.mean_acceptance_length.to_string(),
            m.acceptance_rate.to_string(),
            m.tokens_per_second.to_string(),
            r.speedup.to_string(),
            m.weight_bytes_loaded.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
