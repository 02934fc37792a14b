//! Line-delimited JSON reports.
//!
//! ```text
//! {"type":"header","format":"oavcd-report","version":1,...}
//! {"type":"record",...}            one per question, input order
//! {"type":"summary","pope":{...},"mme":{...},"failures":0}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalRecord, MmeCategoryScore, PopeMetrics, Result, RunSettings};

pub const REPORT_FORMAT: &str = "oavcd-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub format: String,
    pub version: u32,
    pub bench: String,
    pub questions_file: String,
    pub provider: String,
    pub settings: RunSettings,
    pub questions: usize,
}

impl ReportHeader {
    pub fn new(bench: &str, questions_file: &str, provider: &str, settings: RunSettings, questions: usize) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            bench: bench.into(),
            questions_file: questions_file.into(),
            provider: provider.into(),
            settings,
            questions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub pope: PopeMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mme: Option<BTreeMap<String, MmeCategoryScore>>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub header: ReportHeader,
    pub records: Vec<EvalRecord>,
    pub summary: ReportSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Header(ReportHeader),
    Record(EvalRecord),
    Summary(ReportSummary),
}

fn line<W: Write>(w: &mut W, l: &Line) -> Result<()> {
    serde_json::to_writer(&mut *w, l).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_report(mut w: impl Write, report: &Report) -> Result<()> {
    line(&mut w, &Line::Header(report.header.clone()))?;
    for r in &report.records {
        line(&mut w, &Line::Record(r.clone()))?;
    }
    line(&mut w, &Line::Summary(report.summary.clone()))?;
    w.flush()?;
    Ok(())
}

pub fn read_report(r: impl BufRead, origin: &str) -> Result<Report> {
    let err = |line: usize, message: String| EvalError::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut header = None;
    let mut records = Vec::new();
    let mut summary = None;
    for (i, text) in r.lines().enumerate() {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(&text).map_err(|e| err(i + 1, e.to_string()))? {
            Line::Header(h) => {
                if h.format != REPORT_FORMAT || h.version != REPORT_VERSION {
                    return Err(err(i + 1, format!("unsupported report {} v{}", h.format, h.version)));
                }
                header = Some(h);
            }
            Line::Record(rec) => records.push(rec),
            Line::Summary(s) => summary = Some(s),
        }
    }
    Ok(Report {
        header: header.ok_or_else(|| err(1, "missing header line".into()))?,
        records,
        summary: summary.ok_or_else(|| err(0, "missing summary line".into()))?,
    })
}
