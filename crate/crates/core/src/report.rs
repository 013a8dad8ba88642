//! CSV and JSON reports for training grids.
//!
//! CSV has one row per (cell, seed, epoch). JSON has one summary object per
//! cell with fields `cell`, `config_hash`, `final_accuracy`, `epsilon`,
//! `bytes`, `seeds`, `aborted_runs`; `epsilon` is `null` when unbounded.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::TrainingRun;

pub const CSV_HEADER: &str =
    "cell,config_hash,seed,epoch,accuracy,cumulative_bytes,epsilon,clip_radius,aborted";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!(
                "report format must be csv or json, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub run: TrainingRun,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub config_hash: String,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: String,
    pub config_hash: String,
    /// Mean over seeds.
    pub final_accuracy: f64,
    /// Largest over seeds.
    pub epsilon: Option<f64>,
    /// Mean cumulative upstream bytes over seeds.
    pub bytes: f64,
    pub seeds: usize,
    pub aborted_runs: usize,
}

impl CellSummary {
    pub fn from_cell(cell: &CellResult) -> Self {
        let n = cell.runs.len().max(1) as f64;
        let eps = cell
            .runs
            .iter()
            .map(|r| r.run.record.final_epsilon())
            .fold(0.0, f64::max);
        Self {
            cell: cell.label.clone(),
            config_hash: cell.config_hash.clone(),
            final_accuracy: cell
                .runs
                .iter()
                .map(|r| r.run.record.final_accuracy)
                .sum::<f64>()
                / n,
            epsilon: eps.is_finite().then_some(eps),
            bytes: cell
                .runs
                .iter()
                .map(|r| r.run.record.total_bytes() as f64)
                .sum::<f64>()
                / n,
            seeds: cell.runs.len(),
            aborted_runs: cell.runs.iter().filter(|r| r.run.record.aborted).count(),
        }
    }
}

pub fn render_report(cells: &[CellResult], format: ReportFormat) -> Result<String> {
    if cells.is_empty() || cells.iter().all(|c| c.runs.is_empty()) {
        return Err(Error::InvalidInput("no records to report".into()));
    }
    match format {
        ReportFormat::Csv => Ok(render_csv(cells)),
        ReportFormat::Json => {
            let summaries: Vec<CellSummary> = cells.iter().map(CellSummary::from_cell).collect();
            let mut text = serde_json::to_string_pretty(&summaries)
                .map_err(|e| Error::InvalidInput(format!("cannot serialize summary: {e}")))?;
            text.push('\n');
            Ok(text)
        }
    }
}

fn render_csv(cells: &[CellResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for cell in cells {
        for sr in &cell.runs {
            let r = &sr.run.record;
            let clip = sr
                .run
                .meta
                .clip_radius
                .map(|c| c.to_string())
                .unwrap_or_default();
            for (epoch, acc) in r.epoch_accuracy.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "\"{}\",{},{},{},{},{},{},{},{}",
                    cell.label,
                    cell.config_hash,
                    sr.seed,
                    epoch + 1,
                    acc,
                    r.cumulative_bytes[epoch],
                    r.privacy_trace[epoch].epsilon,
                    clip,
                    r.aborted
                );
            }
        }
    }
    out
}

/// Renders before touching the filesystem, so an empty record set leaves
/// no file behind.
pub fn emit_report(cells: &[CellResult], format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(cells, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
