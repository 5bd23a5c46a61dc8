//! Report rows and their CSV/JSON serialization.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::debias::ProjectorSidecar;
use crate::embedding_store::Attribute;
use crate::error::{Error, Result};
use crate::metrics::{HarmEntry, SkewReport};
use crate::stats::BootstrapCI;

/// Identifies one audited checkpoint on one dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub dataset: String,
    pub model: String,
    pub size: String,
    pub data_size: String,
    pub debias: String,
}

impl RunKey {
    pub fn new(
        dataset: impl Into<String>,
        model: impl Into<String>,
        size: impl Into<String>,
        data_size: impl Into<String>,
        debias: impl Into<String>,
    ) -> Self {
        RunKey {
            dataset: dataset.into(),
            model: model.into(),
            size: size.into(),
            data_size: data_size.into(),
            debias: debias.into(),
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{} {} {}@{} ({})",
            self.dataset, self.model, self.size, self.data_size, self.debias
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalSummary {
    pub task: String,
    pub mean: f64,
    pub sd: f64,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub key: RunKey,
    pub images: usize,
    pub skews: Vec<SkewReport>,
    pub harm: Vec<HarmEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub directional: Vec<DirectionalSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projector: Option<ProjectorSidecar>,
}

pub const TASKS: [&str; 3] = ["crime", "comm", "agency"];
pub const HARM_EVENTS: [&str; 4] = ["C", "NH", "NC", "NA"];

impl ReportRow {
    pub fn skew(&self, attribute: Attribute, task: &str) -> Option<&SkewReport> {
        self.skews
            .iter()
            .find(|s| s.attribute == attribute && s.task == task)
    }

    pub fn harm(&self, event: &str) -> Option<&HarmEntry> {
        self.harm.iter().find(|h| h.event == event)
    }

    /// A row holding published values only: skews per task in
    /// crime/comm/agency order and harm rates as fractions in C/NH/NC/NA order.
    pub fn from_values(key: RunKey, gender: [f64; 3], race: [f64; 3], harm: [f64; 4]) -> Self {
        let mut skews = Vec::with_capacity(6);
        for (attribute, values) in [(Attribute::Gender, gender), (Attribute::Race, race)] {
            for (task, v) in TASKS.iter().zip(values) {
                skews.push(SkewReport::from_value(attribute, *task, v));
            }
        }
        let harm = HARM_EVENTS
            .iter()
            .zip(harm)
            .map(|(e, rate)| HarmEntry {
                event: e.to_string(),
                rate,
                ci: None,
            })
            .collect();
        ReportRow {
            key,
            images: 0,
            skews,
            harm,
            directional: Vec::new(),
            projector: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub key: RunKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<Attribute>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub seed: u64,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resamples: Option<usize>,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub skipped: Vec<Skipped>,
}

impl AuditReport {
    pub fn from_rows(rows: Vec<ReportRow>) -> Self {
        AuditReport {
            seed: 0,
            fingerprint: String::new(),
            resamples: None,
            rows,
            skipped: Vec::new(),
        }
    }

    pub fn row(&self, key: &RunKey) -> Option<&ReportRow> {
        self.rows.iter().find(|r| &r.key == key)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Percentage with two decimals, ties rounded to even.
pub fn format_percent(rate: f64) -> String {
    let r = (rate * 100.0 * 100.0).round_ties_even() / 100.0;
    format!("{:.2}", r + 0.0)
}

pub fn format_skew(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

pub const TABLE_HEADER: [&str; 15] = [
    "dataset",
    "model",
    "size",
    "data_size",
    "debias",
    "gender_crime",
    "gender_comm",
    "gender_agency",
    "race_crime",
    "race_comm",
    "race_agency",
    "pct_C",
    "pct_NH",
    "pct_NC",
    "pct_NA",
];

/// One row per checkpoint and dataset, columns in the published table order.
pub fn write_table_csv<W: Write>(report: &AuditReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_HEADER)?;
    for row in &report.rows {
        let k = &row.key;
        let mut rec = vec![
            k.dataset.clone(),
            k.model.clone(),
            k.size.clone(),
            k.data_size.clone(),
            k.debias.clone(),
        ];
        for attribute in [Attribute::Gender, Attribute::Race] {
            for task in TASKS {
                rec.push(format_skew(row.skew(attribute, task).and_then(|s| s.mean)));
            }
        }
        for e in HARM_EVENTS {
            rec.push(row.harm(e).map_or_else(String::new, |h| format_percent(h.rate)));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn ci_cells(ci: Option<&BootstrapCI>) -> [String; 3] {
    match ci {
        Some(c) => [
            format!("{}", c.lower),
            format!("{}", c.upper),
            c.significant.to_string(),
        ],
        None => Default::default(),
    }
}

/// Long form: one line per metric value with its interval.
pub fn write_metrics_csv<W: Write>(report: &AuditReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "dataset", "model", "size", "data_size", "debias", "metric", "attribute", "task", "event",
        "value", "ci_lower", "ci_upper", "significant", "excluded",
    ])?;
    for row in &report.rows {
        let k = &row.key;
        let head = [
            k.dataset.as_str(),
            k.model.as_str(),
            k.size.as_str(),
            k.data_size.as_str(),
            k.debias.as_str(),
        ];
        for s in &row.skews {
            let [lo, hi, sig] = ci_cells(s.ci.as_ref());
            let mut rec: Vec<String> = head.iter().map(|v| v.to_string()).collect();
            rec.extend([
                "mean_max_skew".into(),
                s.attribute.to_string(),
                s.task.clone(),
                String::new(),
                s.mean.map_or_else(String::new, |v| v.to_string()),
                lo,
                hi,
                sig,
                s.excluded.to_string(),
            ]);
            w.write_record(&rec)?;
        }
        for h in &row.harm {
            let [lo, hi, sig] = ci_cells(h.ci.as_ref());
            let mut rec: Vec<String> = head.iter().map(|v| v.to_string()).collect();
            rec.extend([
                "harm_rate".into(),
                String::new(),
                String::new(),
                h.event.clone(),
                h.rate.to_string(),
                lo,
                hi,
                sig,
                h.ci.map_or(0, |c| c.excluded).to_string(),
            ]);
            w.write_record(&rec)?;
        }
        for d in &row.directional {
            let mut rec: Vec<String> = head.iter().map(|v| v.to_string()).collect();
            rec.extend([
                "directional_bias".into(),
                String::new(),
                d.task.clone(),
                String::new(),
                d.mean.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ]);
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    #[default]
    All,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "all" => Ok(ReportFormat::All),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `table.csv` and `metrics.csv`, and/or `report.json`, into `dir`.
pub fn emit_report(report: &AuditReport, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if matches!(format, ReportFormat::Csv | ReportFormat::All) {
        let mut buf = Vec::new();
        write_table_csv(report, &mut buf)?;
        written.push(write_file(dir.join("table.csv"), &buf)?);
        let mut buf = Vec::new();
        write_metrics_csv(report, &mut buf)?;
        written.push(write_file(dir.join("metrics.csv"), &buf)?);
    }
    if matches!(format, ReportFormat::Json | ReportFormat::All) {
        written.push(write_file(dir.join("report.json"), report.to_json()?.as_bytes())?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_b32() -> ReportRow {
        ReportRow::from_values(
            RunKey::new("FairFace", "CLIP", "B/32", "400M", "none"),
            [1.19, 0.04, 0.15],
            [1.81, 0.22, 0.59],
            [0.08, 0.0, 0.62, 0.15],
        )
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(0.62), "62.00");
        assert_eq!(format_percent(0.0), "0.00");
        assert_eq!(format_percent(0.123456), "12.35");
        assert_eq!(format_percent(0.5), "50.00");
        assert_eq!(format_percent(1.0), "100.00");
    }

    #[test]
    fn table_row_layout() {
        let report = AuditReport::from_rows(vec![clip_b32()]);
        let mut buf = Vec::new();
        write_table_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TABLE_HEADER.join(","));
        assert_eq!(
            lines[1],
            "FairFace,CLIP,B/32,400M,none,1.1900,0.0400,0.1500,1.8100,0.2200,0.5900,8.00,0.00,62.00,15.00"
        );
    }

    #[test]
    fn empty_report_has_header_only() {
        let mut buf = Vec::new();
        write_table_csv(&AuditReport::from_rows(vec![]), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }

    #[test]
    fn json_round_trip() {
        let mut report = AuditReport::from_rows(vec![clip_b32()]);
        report.seed = 17;
        report.rows[0].skews[0].ci = Some(BootstrapCI {
            point: 1.19,
            lower: 0.1 + 0.2,
            upper: 2.0 / 3.0,
            level: 0.95,
            significant: true,
            excluded: 2,
        });
        let back = AuditReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn emit_writes_requested_files() {
        let dir = tempfile::tempdir().unwrap();
        let report = AuditReport::from_rows(vec![clip_b32()]);
        let files = emit_report(&report, dir.path(), ReportFormat::Csv).unwrap();
        assert_eq!(files.len(), 2);
        assert!(!dir.path().join("report.json").exists());
        let files = emit_report(&report, dir.path(), ReportFormat::All).unwrap();
        assert_eq!(files.len(), 3);
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 6 + 4);
    }
}
