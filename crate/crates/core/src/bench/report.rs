//! Report rendering: per-record CSV, JSON and a dataset × {SI-SDR, SDRi}
//! markdown table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::Report(format!("unknown report format {s:?}; valid: csv, json, markdown"))),
        }
    }
}

/// One CSV line; failed records carry a reason and no metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub id: String,
    pub status: String,
    pub sdr_db: Option<f64>,
    pub si_sdr_db: Option<f64>,
    pub sdri_db: Option<f64>,
    pub ssnr_db: Option<f64>,
    pub capped: Option<bool>,
    pub reason: Option<String>,
}

fn non_empty(r: &MetricReport) -> Result<()> {
    if r.records.is_empty() {
        return Err(Error::Report(format!(
            "report {:?} has no evaluated records ({} failed); nothing to emit",
            r.dataset,
            r.failed.len()
        )));
    }
    Ok(())
}

pub fn report_csv(r: &MetricReport) -> Result<String> {
    non_empty(r)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let ok = r.records.iter().map(|m| CsvRow {
        id: m.id.clone(),
        status: "ok".into(),
        sdr_db: Some(m.sdr_db),
        si_sdr_db: Some(m.si_sdr_db),
        sdri_db: Some(m.sdri_db),
        ssnr_db: m.ssnr_db,
        capped: Some(m.capped),
        reason: None,
    });
    let failed = r.failed.iter().map(|f| CsvRow {
        id: f.id.clone(),
        status: "failed".into(),
        sdr_db: None,
        si_sdr_db: None,
        sdri_db: None,
        ssnr_db: None,
        capped: None,
        reason: Some(f.reason.clone()),
    });
    for row in ok.chain(failed) {
        w.serialize(row).map_err(|e| Error::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Report(e.to_string()))
}

pub fn report_json(r: &MetricReport) -> Result<String> {
    non_empty(r)?;
    let mut s = serde_json::to_string_pretty(r)?;
    s.push('\n');
    Ok(s)
}

pub fn parse_report_json(text: &str) -> Result<MetricReport> {
    Ok(serde_json::from_str(text)?)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

/// One row per model, SI-SDR and SDRi columns per dataset. Each row must
/// list the same datasets in the same order.
pub fn markdown_table(rows: &[(&str, &[MetricReport])]) -> Result<String> {
    let Some((_, first)) = rows.first() else {
        return Err(Error::Report("no rows to tabulate".into()));
    };
    if first.is_empty() {
        return Err(Error::Report("no datasets to tabulate".into()));
    }
    let datasets: Vec<&str> = first.iter().map(|r| r.dataset.as_str()).collect();
    let mut s = String::from("| Model |");
    for d in &datasets {
        let _ = write!(s, " {d} SI-SDR (dB) | {d} SDRi (dB) |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(2 * datasets.len()));
    s.push('\n');
    for (model, reports) in rows {
        let names: Vec<&str> = reports.iter().map(|r| r.dataset.as_str()).collect();
        if names != datasets {
            return Err(Error::Report(format!("row {model:?} lists datasets {names:?}, expected {datasets:?}")));
        }
        let _ = write!(s, "| {model} |");
        for r in *reports {
            non_empty(r)?;
            let _ = write!(s, " {} | {} |", cell(r.mean_si_sdr()), cell(r.mean_sdri()));
        }
        s.push('\n');
    }
    s.push('\n');
    for r in rows.iter().flat_map(|(_, r)| r.iter()).take(datasets.len()) {
        let a = &r.aggregates;
        let _ = writeln!(s, "- {}: {} records, {} failed, {} capped", r.dataset, a.count, a.failed, a.capped);
    }
    Ok(s)
}

pub fn render_report(r: &MetricReport, format: ReportFormat, model: &str) -> Result<String> {
    match format {
        ReportFormat::Csv => report_csv(r),
        ReportFormat::Json => report_json(r),
        ReportFormat::Markdown => markdown_table(&[(model, std::slice::from_ref(r))]),
    }
}

pub fn emit_report(r: &MetricReport, format: ReportFormat, model: &str, path: &Path) -> Result<()> {
    let text = render_report(r, format, model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
