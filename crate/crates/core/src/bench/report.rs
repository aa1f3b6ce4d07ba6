//! Report serialization. Accuracy results and timing measurements live in
//! separate sections so determinism checks can diff everything except the
//! timings; the CSV flattens both into one row per (fold, scenario, head).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::amfc::HeadKind;
use crate::error::{Error, Result};

use super::{FoldFailure, FoldRecord, TimingStats};

pub const REPORT_SCHEMA: &str = "amfc-report/1";
pub const CSV_HEADER: &str = "fold,scenario,head,acc_amfc,acc_cnn,t_cnn_ns,t_amfc_ns,spu";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub threads: usize,
    pub build: String,
    pub timed_path: String,
}

/// Accuracy side of one cell; byte-stable across identically-seeded runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub fold: usize,
    pub scenario: u8,
    pub head: HeadKind,
    pub acc_amfc: f64,
    pub acc_cnn: f64,
}

/// Timing side of one cell; varies run to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub fold: usize,
    pub scenario: u8,
    pub head: HeadKind,
    pub t_cnn: TimingStats,
    pub t_amfc: TimingStats,
    pub spu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub environment: Environment,
    pub results: Vec<AccuracyRecord>,
    pub timings: Vec<TimingRecord>,
    pub failures: Vec<FoldFailure>,
}

impl BenchReport {
    pub fn new(
        environment: Environment,
        records: Vec<FoldRecord>,
        failures: Vec<FoldFailure>,
    ) -> Self {
        let results = records
            .iter()
            .map(|r| AccuracyRecord {
                fold: r.fold,
                scenario: r.scenario,
                head: r.head,
                acc_amfc: r.acc_amfc,
                acc_cnn: r.acc_cnn,
            })
            .collect();
        let timings = records
            .iter()
            .map(|r| TimingRecord {
                fold: r.fold,
                scenario: r.scenario,
                head: r.head,
                t_cnn: r.t_cnn,
                t_amfc: r.t_amfc,
                spu: r.spu,
            })
            .collect();
        BenchReport {
            schema: REPORT_SCHEMA.to_string(),
            environment,
            results,
            timings,
            failures,
        }
    }
}

pub fn report_to_json(report: &BenchReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Format(format!("report encode: {e}")))
}

pub fn parse_report_json(text: &str) -> Result<BenchReport> {
    let report: BenchReport =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report parse: {e}")))?;
    if report.schema != REPORT_SCHEMA {
        return Err(Error::Format(format!(
            "unsupported report schema {:?}",
            report.schema
        )));
    }
    Ok(report)
}

/// Flatten results + timings into CSV rows, one per (fold, scenario, head),
/// in results order. Floats print in shortest round-trip form, so the listed
/// columns survive a JSON -> CSV -> parse cycle exactly.
pub fn report_to_csv(report: &BenchReport) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (res, tim) in report.results.iter().zip(&report.timings) {
        if (res.fold, res.scenario, res.head) != (tim.fold, tim.scenario, tim.head) {
            return Err(Error::Format(
                "report results and timings are out of step".into(),
            ));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            res.fold,
            res.scenario,
            res.head,
            res.acc_amfc,
            res.acc_cnn,
            tim.t_cnn.median_ns,
            tim.t_amfc.median_ns,
            tim.spu
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn emit_report(report: &BenchReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report_to_json(report)?,
        ReportFormat::Csv => report_to_csv(report)?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
